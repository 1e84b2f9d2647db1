//! SimSiam projector and predictor MLPs. Their normalization layers are
//! always batch norm, independent of the backbone's norm kind.

use ndarray::{Array2, Array4, ArrayD};
use rand::Rng;

use super::config::HeadConfig;
use crate::error::Result;
use crate::nn::layers::{relu_backward, relu_inplace};
use crate::nn::norm::{BatchNorm, Norm, NormCache, BN_MOMENTUM, NORM_EPS};
use crate::nn::param::{join, Parameterized, SlotKind, SlotMut};
use crate::nn::Linear;

fn to4(x: Array2<f32>) -> Array4<f32> {
    let (b, c) = x.dim();
    x.into_shape_with_order((b, c, 1, 1)).expect("shape")
}

fn to2(x: Array4<f32>) -> Array2<f32> {
    let (b, c, _, _) = x.dim();
    x.into_shape_with_order((b, c)).expect("shape")
}

/// Linear (no bias) -> BatchNorm -> optional ReLU.
#[derive(Debug, Clone)]
pub struct MlpLayer {
    pub fc: Linear,
    pub bn: Norm,
    pub relu: bool,
}

pub struct MlpTape {
    input: Array2<f32>,
    norm: NormCache,
    out: Array2<f32>,
}

impl MlpLayer {
    fn new<R: Rng>(input: usize, output: usize, affine: bool, relu: bool, rng: &mut R) -> Self {
        Self {
            fc: Linear::new(input, output, false, rng),
            bn: Norm::Batch(BatchNorm::new(output, NORM_EPS, BN_MOMENTUM, affine)),
            relu,
        }
    }

    fn forward(&mut self, x: Array2<f32>, mixed: bool) -> Result<(Array2<f32>, MlpTape)> {
        let h = self.fc.forward(&x, mixed)?;
        let (y, norm) = self.bn.forward(&to4(h), true)?;
        let mut y = to2(y);
        if self.relu {
            relu_inplace(&mut y);
        }
        Ok((
            y.clone(),
            MlpTape {
                input: x,
                norm,
                out: y,
            },
        ))
    }

    fn forward_eval(&self, x: &Array2<f32>) -> Result<Array2<f32>> {
        let h = self.fc.forward(x, false)?;
        let mut y = to2(self.bn.forward_eval(&to4(h))?);
        if self.relu {
            relu_inplace(&mut y);
        }
        Ok(y)
    }

    fn backward(&mut self, t: &MlpTape, mut dy: Array2<f32>) -> Array2<f32> {
        if self.relu {
            relu_backward(&t.out, &mut dy);
        }
        let dh = to2(self.bn.backward(&t.norm, &to4(dy)));
        self.fc.backward(&t.input, &dh)
    }
}

/// Bottleneck predictor: Linear/BN/ReLU then Linear with bias.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub hidden: MlpLayer,
    pub out: Linear,
}

/// Projector (`projector_layers` x Linear/BN, ReLU on all but the last, last BN
/// without affine) followed by a bottleneck predictor. With
/// `identity_predictor` the predictor is omitted and `p = z`.
#[derive(Debug, Clone)]
pub struct SimSiamHead {
    pub cfg: HeadConfig,
    pub projector: Vec<MlpLayer>,
    pub predictor: Option<Predictor>,
}

pub struct HeadTape {
    projector: Vec<MlpTape>,
    predictor: Option<(MlpTape, Array2<f32>)>,
}

impl SimSiamHead {
    pub fn new<R: Rng>(feature_dim: usize, cfg: HeadConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.projector_dim;
        let projector = (0..cfg.projector_layers)
            .map(|i| {
                let last = i + 1 == cfg.projector_layers;
                let input = if i == 0 { feature_dim } else { d };
                MlpLayer::new(input, d, !last, !last, rng)
            })
            .collect();
        Ok(Self {
            cfg,
            projector,
            predictor: (!cfg.identity_predictor).then(|| Predictor {
                hidden: MlpLayer::new(d, cfg.predictor_hidden, true, true, rng),
                out: Linear::new(cfg.predictor_hidden, d, true, rng),
            }),
        })
    }

    /// Returns `(z, p, tape)`.
    pub fn forward(&mut self, feats: Array2<f32>, mixed: bool) -> Result<(Array2<f32>, Array2<f32>, HeadTape)> {
        let mut h = feats;
        let mut tapes = Vec::with_capacity(self.projector.len());
        for layer in &mut self.projector {
            let (y, t) = layer.forward(h, mixed)?;
            tapes.push(t);
            h = y;
        }
        let z = h;
        let (p, predictor) = match &mut self.predictor {
            Some(pr) => {
                let (hidden, pt) = pr.hidden.forward(z.clone(), mixed)?;
                (pr.out.forward(&hidden, mixed)?, Some((pt, hidden)))
            }
            None => (z.clone(), None),
        };
        Ok((
            z,
            p,
            HeadTape {
                projector: tapes,
                predictor,
            },
        ))
    }

    /// Evaluation-mode `(z, p)`.
    pub fn forward_eval(&self, feats: &Array2<f32>) -> Result<(Array2<f32>, Array2<f32>)> {
        let mut h = feats.clone();
        for layer in &self.projector {
            h = layer.forward_eval(&h)?;
        }
        let p = match &self.predictor {
            Some(pr) => pr.out.forward(&pr.hidden.forward_eval(&h)?, false)?,
            None => h.clone(),
        };
        Ok((h, p))
    }

    /// Backpropagates `dp` (and an optional direct gradient on `z`) to the
    /// backbone features.
    pub fn backward(&mut self, tape: &HeadTape, dz: Option<&Array2<f32>>, dp: &Array2<f32>) -> Array2<f32> {
        let mut dzt = match (&mut self.predictor, &tape.predictor) {
            (Some(pr), Some((pt, hidden))) => {
                let dhidden = pr.out.backward(hidden, dp);
                pr.hidden.backward(pt, dhidden)
            }
            _ => dp.clone(),
        };
        if let Some(dz) = dz {
            dzt += dz;
        }
        let mut d = dzt;
        for (layer, t) in self.projector.iter_mut().zip(&tape.projector).rev() {
            d = layer.backward(t, d);
        }
        d
    }
}

impl Parameterized for SimSiamHead {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotKind, &ArrayD<f32>)) {
        for (i, l) in self.projector.iter().enumerate() {
            l.fc.visit(&join(prefix, &format!("projector.fc{}", i + 1)), f);
            l.bn.visit(&join(prefix, &format!("projector.bn{}", i + 1)), f);
        }
        if let Some(pr) = &self.predictor {
            pr.hidden.fc.visit(&join(prefix, "predictor.fc1"), f);
            pr.hidden.bn.visit(&join(prefix, "predictor.bn1"), f);
            pr.out.visit(&join(prefix, "predictor.fc2"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        for (i, l) in self.projector.iter_mut().enumerate() {
            l.fc.visit_mut(&join(prefix, &format!("projector.fc{}", i + 1)), f);
            l.bn.visit_mut(&join(prefix, &format!("projector.bn{}", i + 1)), f);
        }
        if let Some(pr) = &mut self.predictor {
            pr.hidden.fc.visit_mut(&join(prefix, "predictor.fc1"), f);
            pr.hidden.bn.visit_mut(&join(prefix, "predictor.bn1"), f);
            pr.out.visit_mut(&join(prefix, "predictor.fc2"), f);
        }
    }
}
