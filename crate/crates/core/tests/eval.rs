//! Evaluation oracles and invariants: kNN, metrics, collapse statistic,
//! t-SNE and the embedding CSV export.

use bitsiam::eval::metrics::cross_entropy;
use bitsiam::eval::{balanced_metrics, collapse_std, focal_loss, knn_predict, silhouette, tsne, write_embeddings, TsneConfig};
use ndarray::{array, Array2, Axis};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
}

/// Random orthogonal matrix from Gram-Schmidt on a Gaussian matrix.
fn random_rotation(d: usize, seed: u64) -> Array2<f64> {
    let g = gaussian(d, d, seed).mapv(f64::from);
    let mut q = Array2::<f64>::zeros((d, d));
    for i in 0..d {
        let mut v = g.row(i).to_owned();
        for j in 0..i {
            let qj = q.row(j);
            let p = v.dot(&qj);
            v.scaled_add(-p, &qj);
        }
        let n = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / n));
    }
    q
}

#[test]
fn knn_handcrafted_points() {
    // Two clusters on the unit circle; queries near each, k = 3.
    let train = array![[1.0f32, 0.0], [0.9, 0.1], [0.95, -0.1], [0.0, 1.0], [0.1, 0.9], [-0.1, 0.95]];
    let labels = [0, 0, 0, 1, 1, 1];
    let query = array![[1.0f32, 0.05], [0.05, 1.0], [0.7, 0.72]];
    let pred = knn_predict(train.view(), &labels, query.view(), 3, 0.07).unwrap();
    assert_eq!(pred[..2], [0, 1]);

    // Brute-force oracle for the ambiguous third query.
    let unit = |r: ndarray::ArrayView1<f32>| {
        let n = r.dot(&r).sqrt();
        r.mapv(|v| v / n)
    };
    let q = unit(query.row(2));
    let mut sims: Vec<(f32, usize)> = train
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(i, r)| (unit(r).dot(&q), i))
        .collect();
    sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut votes = [0f64; 2];
    for &(s, i) in &sims[..3] {
        votes[labels[i]] += (s as f64 / 0.07).exp();
    }
    let want = usize::from(votes[1] > votes[0]);
    assert_eq!(pred[2], want);
}

#[test]
fn collapse_matches_inverse_sqrt_d_for_gaussians() {
    let x = gaussian(10_000, 16, 7);
    let s = collapse_std(x.view()).unwrap();
    assert!((s - 0.25).abs() <= 0.02, "collapse_std {s}");
}

#[test]
fn collapse_zero_for_identical_directions() {
    let x = Array2::from_shape_fn((50, 8), |(i, j)| (i + 1) as f32 * (j as f32 - 3.5));
    assert!(collapse_std(x.view()).unwrap() < 1e-6);
}

/// Root-mean-square of the per-dimension std of the normalized rows. Unlike
/// the mean of the stds this is a function of the covariance trace only.
fn rms_std(x: &Array2<f32>) -> f64 {
    let z = x.mapv(f64::from);
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    let z = &z / &norms.insert_axis(Axis(1));
    let var = z.var_axis(Axis(0), 0.0);
    var.mean().unwrap().sqrt()
}

#[test]
fn collapse_under_rotation() {
    // Isotropic features: the statistic survives a rotation.
    let x = gaussian(4000, 8, 1);
    let r = random_rotation(8, 2);
    let y = x.mapv(f64::from).dot(&r).mapv(|v| v as f32);
    let (a, b) = (collapse_std(x.view()).unwrap(), collapse_std(y.view()).unwrap());
    assert!((rms_std(&x) - rms_std(&y)).abs() < 1e-6);
    assert!((a - b).abs() < 0.01, "{a} vs {b}");

    // Anisotropic features: the mean of per-axis stds is basis dependent.
    // The same two points give sqrt(2)/6 in one basis and 1/3 after a
    // 45 degree turn in the first plane.
    let line = Array2::from_shape_fn((2, 2), |(i, j)| if j == 0 { if i == 0 { 1.0 } else { -1.0 } } else { 0.0 });
    let line = ndarray::concatenate![Axis(1), line, Array2::<f32>::ones((2, 1))];
    let c = std::f64::consts::FRAC_1_SQRT_2;
    let rot = array![[c, c, 0.0], [-c, c, 0.0], [0.0, 0.0, 1.0]];
    let turned = line.mapv(f64::from).dot(&rot).mapv(|v| v as f32);
    let (a, b) = (collapse_std(line.view()).unwrap(), collapse_std(turned.view()).unwrap());
    assert!((a - b).abs() > 0.05, "{a} vs {b}");
    assert!((rms_std(&line) - rms_std(&turned)).abs() < 1e-6);
}

#[test]
fn tsne_separates_three_clusters() {
    let mut x = gaussian(90, 10, 3);
    let mut labels = Vec::new();
    for (i, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let c = i % 3;
        row[c] += 12.0;
        labels.push(c);
    }
    let cfg = TsneConfig {
        perplexity: 15.0,
        iterations: 500,
        seed: 4,
        ..Default::default()
    };
    let y = tsne(x.view(), &cfg).unwrap();
    let s = silhouette(y.view(), &labels).unwrap();
    assert!(s > 0.5, "silhouette {s}");
    assert_eq!(tsne(x.view(), &cfg).unwrap(), y);
}

#[test]
fn embedding_csv_shape_and_reproducible_coords() {
    let dir = tempfile::tempdir().unwrap();
    let feats = gaussian(10, 2048, 9);
    let ids: Vec<String> = (0..10).map(|i| format!("img{i}")).collect();
    let labels: Vec<usize> = (0..10).map(|i| i % 3).collect();
    let names: Vec<String> = ["nv", "mel", "bkl"].iter().map(|s| s.to_string()).collect();
    let cfg = TsneConfig {
        perplexity: 3.0,
        iterations: 250,
        seed: 1,
        ..Default::default()
    };
    let a = write_embeddings(feats.view(), &ids, &labels, &names, 0, &dir.path().join("a"), &cfg).unwrap();
    let b = write_embeddings(feats.view(), &ids, &labels, &names, 0, &dir.path().join("b"), &cfg).unwrap();

    let mut r = csv::Reader::from_path(&a.features_csv).unwrap();
    assert_eq!(r.headers().unwrap().len(), 2050);
    let rows: Vec<csv::StringRecord> = r.records().map(|x| x.unwrap()).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows.iter().all(|x| x.len() == 2050));
    assert_eq!(
        std::fs::read(&a.coords_csv).unwrap(),
        std::fs::read(&b.coords_csv).unwrap()
    );
    assert!(a.binary_png.exists() && a.subclass_png.exists());
}

fn arb_logits() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..6, 2usize..6).prop_flat_map(|(b, c)| {
        (
            proptest::collection::vec(-20.0f64..20.0, b * c),
            proptest::collection::vec(0..c, b),
        )
            .prop_map(move |(v, l)| (Array2::from_shape_vec((b, c), v).unwrap(), l))
    })
}

proptest! {
    #[test]
    fn focal_never_exceeds_cross_entropy((logits, labels) in arb_logits(), gamma in 0.0f64..5.0) {
        let (f, _) = focal_loss(logits.view(), &labels, gamma).unwrap();
        let ce = cross_entropy(logits.view(), &labels).unwrap();
        prop_assert!(f <= ce + 1e-12, "focal {} > ce {}", f, ce);
        let (f0, _) = focal_loss(logits.view(), &labels, 0.0).unwrap();
        prop_assert!((f0 - ce).abs() <= 1e-9 * ce.max(1.0));
    }

    #[test]
    fn balanced_metrics_ignore_sample_order(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let split = |p: &[(usize, usize)]| -> (Vec<usize>, Vec<usize>) { p.iter().copied().unzip() };
        let (p1, t1) = split(&pairs);
        let (p2, t2) = split(&shuffled);
        let a = balanced_metrics(&p1, &t1, 4).unwrap();
        let b = balanced_metrics(&p2, &t2, 4).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn knn_ignores_positive_row_scaling(seed in any::<u64>(), scales in proptest::collection::vec(0.01f32..100.0, 30)) {
        let train = gaussian(20, 6, seed);
        let query = gaussian(10, 6, seed ^ 1);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let base = knn_predict(train.view(), &labels, query.view(), 5, 0.1).unwrap();
        let mut t2 = train.clone();
        for (mut r, &s) in t2.axis_iter_mut(Axis(0)).zip(&scales[..20]) {
            r.mapv_inplace(|v| v * s);
        }
        let mut q2 = query.clone();
        for (mut r, &s) in q2.axis_iter_mut(Axis(0)).zip(&scales[20..]) {
            r.mapv_inplace(|v| v * s);
        }
        prop_assert_eq!(base, knn_predict(t2.view(), &labels, q2.view(), 5, 0.1).unwrap());
    }

    #[test]
    fn collapse_ignores_dimension_permutation(seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let x = gaussian(40, 7, seed);
        let mut perm: Vec<usize> = (0..7).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 5));
        let y = x.select(Axis(1), &perm);
        let (a, b) = (collapse_std(x.view()).unwrap(), collapse_std(y.view()).unwrap());
        prop_assert!((a - b).abs() <= 1e-6);
    }
}
