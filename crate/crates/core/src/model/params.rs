use std::collections::BTreeMap;

use rand::Rng as _;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::geometry::POSE_DIM;
use crate::rng;
use crate::sim::CHANNELS;
use crate::tensor::{Gradients, Tape, Tensor, Var};

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub tensors: BTreeMap<String, Tensor>,
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Moves every parameter gradient out of `grads`.
    pub fn collect_grads(&self, grads: &mut Gradients) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), grads.take(*v).expect("parameters require grad")))
            .collect()
    }
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Leaves requiring grad.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.param(t.clone())))
                .collect(),
        }
    }

    /// Frozen leaves, for inference.
    pub fn bind_constant(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| (k.clone(), tape.constant(t.clone())))
                .collect(),
        }
    }

    /// Fails unless names and shapes agree with `reference`.
    pub fn check_against(&self, reference: &ParamStore) -> Result<()> {
        for (name, t) in &reference.tensors {
            match self.tensors.get(name) {
                None => return Err(Error::config(format!("parameter {name} missing"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !reference.tensors.contains_key(*k)) {
            return Err(Error::config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±gain·√(3 / fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
    Uniform(f64),
    Zero,
    /// LSTM gate bias: zero except the forget block.
    ForgetBias(usize),
    /// Pose head bias: zero except the quaternion scalar, so an all-dead
    /// hidden layer still decodes the identity rotation.
    PoseBias,
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn push_linear(specs: &mut Vec<Spec>, name: &str, fan_in: usize, out: usize, relu: bool) {
    let gain = if relu { 2f64.sqrt() } else { 1.0 };
    specs.push(Spec {
        name: format!("{name}.w"),
        shape: vec![fan_in, out],
        init: Init::FanIn { fan_in, gain },
    });
    specs.push(Spec {
        name: format!("{name}.b"),
        shape: vec![out],
        init: Init::Zero,
    });
}

fn push_conv(specs: &mut Vec<Spec>, name: &str, cin: usize, cout: usize, k: usize, relu: bool) {
    let gain = if relu { 2f64.sqrt() } else { 1.0 };
    let fan_in = cin * k * k;
    specs.push(Spec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k],
        init: Init::FanIn { fan_in, gain },
    });
    specs.push(Spec {
        name: format!("{name}.b"),
        shape: vec![cout],
        init: Init::Zero,
    });
}

fn push_lstm(specs: &mut Vec<Spec>, name: &str, input: usize, hidden: usize) {
    let bound = 1.0 / (hidden as f64).sqrt();
    specs.push(Spec {
        name: format!("{name}.wx"),
        shape: vec![input, 4 * hidden],
        init: Init::Uniform(bound),
    });
    specs.push(Spec {
        name: format!("{name}.wh"),
        shape: vec![hidden, 4 * hidden],
        init: Init::Uniform(bound),
    });
    specs.push(Spec {
        name: format!("{name}.b"),
        shape: vec![4 * hidden],
        init: Init::ForgetBias(hidden),
    });
}

fn specs(cfg: &ModelConfig) -> Vec<Spec> {
    let mut s = Vec::new();
    let mut cin = CHANNELS;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        push_conv(&mut s, &format!("enc.stage{i}.down"), cin, c, 4, true);
        push_conv(&mut s, &format!("enc.stage{i}.conv"), c, c, 3, false);
        push_conv(&mut s, &format!("enc.stage{i}.skip"), cin, c, 2, false);
        cin = c;
    }
    if cfg.use_fpn {
        for lvl in cfg.pyramid_stages() {
            push_conv(&mut s, &format!("fpn.lateral{lvl}"), cfg.stage_channels[lvl], cfg.merge_channels, 1, false);
        }
    }
    let mut width = POSE_DIM;
    for (i, &w) in cfg.pose_mlp.iter().enumerate() {
        push_linear(&mut s, &format!("pose_enc.{i}"), width, w, true);
        width = w;
    }
    let feat = cfg.image_feature_dim() + cfg.pose_embed_dim();
    let j = cfg.latent_dim;
    push_linear(&mut s, "head.mu", feat, j, false);
    if cfg.variational {
        push_linear(&mut s, "head.log_sigma", feat, j, false);
    }
    push_lstm(&mut s, "lstm.fwd", j, cfg.lstm_hidden);
    let mut rec = cfg.lstm_hidden;
    if cfg.bidirectional {
        push_lstm(&mut s, "lstm.bwd", j, cfg.lstm_hidden);
        rec *= 2;
    }
    push_linear(&mut s, "lstm.out", rec, j, false);
    let (sh, sw) = cfg.seed_extent();
    push_linear(&mut s, "dec.seed", j, cfg.decoder_channels[0] * sh * sw, true);
    let k = cfg.decoder_channels.len();
    for i in 0..k {
        let cout = cfg.decoder_channels.get(i + 1).copied().unwrap_or(CHANNELS);
        push_conv(&mut s, &format!("dec.up{i}"), cfg.decoder_channels[i], cout, 3, i + 1 < k);
    }
    let mut width = j;
    for (i, &w) in cfg.pose_decoder.iter().enumerate() {
        push_linear(&mut s, &format!("pose_dec.{i}"), width, w, true);
        width = w;
    }
    push_linear(&mut s, "pose_dec.out", width, POSE_DIM, false);
    s.last_mut().expect("bias spec").init = Init::PoseBias;
    s
}

/// Fan-in-scaled uniform weights, zero biases, forget-gate bias 1 and a
/// unit quaternion-scalar bias on the pose head. Drawn
/// from the `init` stream of `seed` in parameter-name order.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut specs = specs(cfg);
    specs.sort_by(|a, b| a.name.cmp(&b.name));
    let mut rng = rng::stream(seed, rng::streams::INIT);
    let mut tensors = BTreeMap::new();
    for spec in specs {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f64> = match spec.init {
            Init::FanIn { fan_in, gain } => {
                let b = gain * (3.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-b..b)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| rng.random_range(-b..b)).collect(),
            Init::Zero => vec![0.0; n],
            Init::PoseBias => (0..n).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect(),
            Init::ForgetBias(h) => (0..n).map(|i| if (h..2 * h).contains(&i) { 1.0 } else { 0.0 }).collect(),
        };
        tensors.insert(spec.name, Tensor::new(spec.shape, data)?);
    }
    Ok(ParamStore { tensors })
}
