//! End to end: BiT-named `.npz` archive, name mapping, surgery, native
//! round trip and a strict load into a batch-norm model.

use std::collections::BTreeMap;

use bitsiam::backbone::{build_model, BackboneConfig, LoadPolicy, NormKind, StemKind};
use bitsiam::surgery::archive::{oihw_to_hwio, write_npz};
use bitsiam::surgery::{convert_gn_to_bn, load_archive, verify_surgery, Checkpoint, NameMap};
use ndarray::{Array4, ArrayD, IxDyn};

fn tiny_gn() -> BackboneConfig {
    BackboneConfig::resnet50(NormKind::GroupNormWs)
        .with_depth(14)
        .with_width(0.125)
        .with_groups(2)
}

/// Native name to the archive's naming, plus whether the value is a kernel.
fn bit_name(native: &str) -> (String, bool) {
    if native == "stem.conv.weight" {
        return ("resnet/root_block/standardized_conv2d/kernel".into(), true);
    }
    if let Some(leaf) = native.strip_prefix("norm.") {
        return (format!("resnet/group_norm/{leaf}"), false);
    }
    let parts: Vec<&str> = native.split('.').collect();
    let b = parts[0].strip_prefix("block").unwrap();
    let u: usize = parts[1].strip_prefix("unit").unwrap().parse().unwrap();
    let base = format!("resnet/block{b}/unit{u:02}");
    let sub = |s: &str| match s {
        "norm1" | "conv1" => "a",
        "norm2" | "conv2" => "b",
        "norm3" | "conv3" => "c",
        "proj" => "proj",
        other => panic!("unexpected site {other}"),
    };
    if parts[2].starts_with("norm") {
        (format!("{base}/{}/group_norm/{}", sub(parts[2]), parts[3]), false)
    } else {
        (format!("{base}/{}/standardized_conv2d/kernel", sub(parts[2])), true)
    }
}

fn write_bit_archive(path: &std::path::Path, src: &Checkpoint, classes: usize) {
    let mut arrays: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    for (i, (name, t)) in src.iter().enumerate() {
        let v = t.to_f32().unwrap();
        let (bit, kernel) = bit_name(name);
        let v = if kernel {
            oihw_to_hwio(&v)
        } else if i % 2 == 0 {
            // Released archives store some affine vectors as [1, 1, 1, C].
            let c = v.len();
            v.into_shape_with_order(IxDyn(&[1, 1, 1, c])).unwrap()
        } else {
            v
        };
        arrays.insert(bit, v);
    }
    let feat = src.get("norm.gamma").unwrap().shape[0];
    arrays.insert(
        "resnet/head/conv2d/kernel".into(),
        ArrayD::from_elem(IxDyn(&[1, 1, feat, classes]), 0.01),
    );
    arrays.insert("resnet/head/conv2d/bias".into(), ArrayD::zeros(IxDyn(&[classes])));
    write_npz(path, arrays.iter().map(|(k, v)| (k.as_str(), v))).unwrap();
}

#[test]
fn bit_archive_converts_and_loads_strictly() {
    let dir = tempfile::tempdir().unwrap();
    let gn = build_model(tiny_gn(), None, 3).unwrap();
    let native = gn.to_checkpoint();
    let npz = dir.path().join("bit.npz");
    write_bit_archive(&npz, &native, 10);

    let src = load_archive(&npz, &NameMap::bit_resnet_v2()).unwrap();
    for (name, t) in native.iter() {
        let got = src.get(name).unwrap_or_else(|| panic!("{name} not mapped"));
        assert_eq!(got.shape, t.shape, "{name}");
        assert_eq!(got.to_f32().unwrap(), t.to_f32().unwrap(), "{name}");
    }
    assert!(src.contains("head.weight") && src.contains("head.bias"));

    let target = tiny_gn().with_norm(NormKind::BatchNorm);
    let dst = convert_gn_to_bn(&src, &target, false).unwrap();
    let report = verify_surgery(&src, &dst, &target, false);
    assert!(report.passed, "{:?}", report.failures);

    let path = dir.path().join("converted.ckpt");
    dst.write(&path).unwrap();
    let back = Checkpoint::read(&path).unwrap();
    assert_eq!(back.names().collect::<Vec<_>>(), dst.names().collect::<Vec<_>>());

    let mut bn = build_model(target, None, 99).unwrap();
    let load = bn.load_checkpoint(&back, &LoadPolicy::strict()).unwrap();
    assert!(load.missing.is_empty(), "{:?}", load.missing);
    assert!(load.unexpected.is_empty(), "{:?}", load.unexpected);
    assert_eq!(
        bn.to_checkpoint().get("block2.unit1.conv2.weight").unwrap().data,
        native.get("block2.unit1.conv2.weight").unwrap().data
    );
    let x = Array4::from_shape_fn((2, 3, 32, 32), |(n, c, h, w)| ((n + c * 7 + h * 3 + w) % 11) as f32 / 11.0);
    let f = bn.features(&x).unwrap();
    assert_eq!(f.dim(), (2, 256));
    assert!(f.iter().all(|v| v.is_finite()));
}

#[test]
fn cifar_target_reinitializes_stem_from_archive() {
    let dir = tempfile::tempdir().unwrap();
    let native = build_model(tiny_gn(), None, 5).unwrap().to_checkpoint();
    let npz = dir.path().join("bit.npz");
    write_bit_archive(&npz, &native, 4);
    let src = load_archive(&npz, &NameMap::bit_resnet_v2()).unwrap();

    let target = tiny_gn().with_norm(NormKind::BatchNorm).with_stem(StemKind::Cifar);
    let dst = convert_gn_to_bn(&src, &target, true).unwrap();
    assert!(verify_surgery(&src, &dst, &target, true).passed);
    assert!(!dst.contains("stem.conv.weight"));
    let mut bn = build_model(target, None, 1).unwrap();
    let load = bn
        .load_checkpoint(&dst, &LoadPolicy::strict().allowing_missing("stem."))
        .unwrap();
    assert_eq!(load.missing, vec!["stem.conv.weight".to_string()]);
    assert!(load.unexpected.is_empty());
}
