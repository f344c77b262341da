use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError};
use crate::numerics::{Rng, SeedStream, Tensor};

/// Freeze/unfreeze unit. Training stages name the groups they hold fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Lm,
    Encoder,
    Projector,
    ContrastHead,
    Temperature,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Lm,
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::ContrastHead,
        ParamGroup::Temperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Lm => "lm",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Projector => "projector",
            ParamGroup::ContrastHead => "contrast_head",
            ParamGroup::Temperature => "temperature",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == s)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered, named tensors. The position of a tensor is its optimizer slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    groups: Vec<ParamGroup>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    fn push(&mut self, name: String, group: ParamGroup, t: Tensor) -> usize {
        self.names.push(name);
        self.groups.push(group);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        self.groups[i]
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index(name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor)> {
        self.names
            .iter()
            .zip(&self.groups)
            .zip(&self.tensors)
            .map(|((n, g), t)| (n.as_str(), *g, t))
    }

    /// Trainable flag per tensor given the frozen groups.
    pub fn trainable_mask(&self, frozen: &[ParamGroup]) -> Vec<bool> {
        self.groups.iter().map(|g| !frozen.contains(g)).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn count_in(&self, group: ParamGroup) -> usize {
        self.iter()
            .filter(|(_, g, _)| *g == group)
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn bitwise_eq(&self, other: &ParamSet) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bitwise_eq(b))
    }

    /// Whether every tensor of `group` is bitwise equal in both sets.
    pub fn group_bitwise_eq(&self, other: &ParamSet, group: ParamGroup) -> bool {
        self.iter()
            .zip(other.iter())
            .filter(|((_, g, _), _)| *g == group)
            .all(|((n1, _, a), (n2, _, b))| n1 == n2 && a.bitwise_eq(b))
    }
}

/// Slot indices of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Slot indices of every named tensor, derived from the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slots {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub lm_blocks: Vec<BlockSlots>,
    pub lm_ln_g: usize,
    pub lm_ln_b: usize,
    pub patch_w: usize,
    pub patch_b: usize,
    pub enc_pos: usize,
    pub enc_blocks: Vec<BlockSlots>,
    pub enc_ln_g: usize,
    pub enc_ln_b: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub head_w: usize,
    pub head_b: usize,
    pub log_temp: usize,
}

pub const INIT_STD: f32 = 0.02;
pub const INIT_TEMPERATURE: f32 = 0.07;
pub const TEMPERATURE_RANGE: (f32, f32) = (0.01, 1.0);

struct Builder<'a> {
    set: ParamSet,
    rng: &'a mut Rng,
}

impl Builder<'_> {
    fn normal(&mut self, name: String, group: ParamGroup, shape: &[usize], std: f32) -> usize {
        let n = shape.iter().product();
        let t = Tensor::new(shape, self.rng.gaussian_vec(n, std)).expect("shape matches");
        self.set.push(name, group, t)
    }

    fn fill(&mut self, name: String, group: ParamGroup, shape: &[usize], value: f32) -> usize {
        let n = shape.iter().product();
        self.set.push(
            name,
            group,
            Tensor::new(shape, vec![value; n]).expect("shape matches"),
        )
    }

    fn block(&mut self, prefix: &str, group: ParamGroup, d: usize, out_std: f32) -> BlockSlots {
        let p = |s: &str| format!("{prefix}.{s}");
        BlockSlots {
            ln1_g: self.fill(p("ln1.gamma"), group, &[d], 1.0),
            ln1_b: self.fill(p("ln1.beta"), group, &[d], 0.0),
            wq: self.normal(p("attn.wq"), group, &[d, d], INIT_STD),
            wk: self.normal(p("attn.wk"), group, &[d, d], INIT_STD),
            wv: self.normal(p("attn.wv"), group, &[d, d], INIT_STD),
            wo: self.normal(p("attn.wo"), group, &[d, d], out_std),
            bo: self.fill(p("attn.bo"), group, &[d], 0.0),
            ln2_g: self.fill(p("ln2.gamma"), group, &[d], 1.0),
            ln2_b: self.fill(p("ln2.beta"), group, &[d], 0.0),
            w1: self.normal(p("mlp.w1"), group, &[d, 4 * d], INIT_STD),
            b1: self.fill(p("mlp.b1"), group, &[4 * d], 0.0),
            w2: self.normal(p("mlp.w2"), group, &[4 * d, d], out_std),
            b2: self.fill(p("mlp.b2"), group, &[d], 0.0),
        }
    }
}

/// Builds the parameter set in its canonical order. `rng` is consumed in that
/// same order, so a config and seed fix every initial value.
fn build(cfg: &ModelConfig, rng: &mut Rng) -> (ParamSet, Slots) {
    use ParamGroup::*;
    let mut b = Builder {
        set: ParamSet::default(),
        rng,
    };
    let d = cfg.d_model;
    let tok_emb = b.normal("lm.tok_emb".into(), Lm, &[cfg.vocab_size, d], INIT_STD);
    let pos_emb = b.normal("lm.pos_emb".into(), Lm, &[cfg.context_len, d], INIT_STD);
    let out_std = INIT_STD / (2.0 * cfg.n_layers as f32).sqrt();
    let lm_blocks = (0..cfg.n_layers)
        .map(|l| b.block(&format!("lm.block{l}"), Lm, d, out_std))
        .collect();
    let lm_ln_g = b.fill("lm.ln_f.gamma".into(), Lm, &[d], 1.0);
    let lm_ln_b = b.fill("lm.ln_f.beta".into(), Lm, &[d], 0.0);

    let di = cfg.d_img;
    let patch_w = b.normal(
        "encoder.patch_w".into(),
        Encoder,
        &[cfg.patch_dim(), di],
        1.0 / (cfg.patch_dim() as f32).sqrt(),
    );
    let patch_b = b.fill("encoder.patch_b".into(), Encoder, &[di], 0.0);
    let enc_pos = b.normal(
        "encoder.pos_emb".into(),
        Encoder,
        &[cfg.n_patches(), di],
        INIT_STD,
    );
    let enc_std = INIT_STD / (2.0 * cfg.encoder_layers.max(1) as f32).sqrt();
    let enc_blocks = (0..cfg.encoder_layers)
        .map(|l| b.block(&format!("encoder.block{l}"), Encoder, di, enc_std))
        .collect();
    let enc_ln_g = b.fill("encoder.ln_f.gamma".into(), Encoder, &[di], 1.0);
    let enc_ln_b = b.fill("encoder.ln_f.beta".into(), Encoder, &[di], 0.0);

    let proj_w = b.normal(
        "projector.w".into(),
        Projector,
        &[di, cfg.n_prefix * d],
        INIT_STD,
    );
    let proj_b = b.fill("projector.b".into(), Projector, &[cfg.n_prefix * d], 0.0);
    let head_w = b.normal(
        "contrast_head.w".into(),
        ContrastHead,
        &[d, di],
        1.0 / (d as f32).sqrt(),
    );
    let head_b = b.fill("contrast_head.b".into(), ContrastHead, &[di], 0.0);
    let log_temp = b.fill(
        "temperature.log".into(),
        Temperature,
        &[1],
        INIT_TEMPERATURE.ln(),
    );

    let slots = Slots {
        tok_emb,
        pos_emb,
        lm_blocks,
        lm_ln_g,
        lm_ln_b,
        patch_w,
        patch_b,
        enc_pos,
        enc_blocks,
        enc_ln_g,
        enc_ln_b,
        proj_w,
        proj_b,
        head_w,
        head_b,
        log_temp,
    };
    (b.set, slots)
}

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    pub params: ParamSet,
    slots: Slots,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = Rng::new(seed, SeedStream::Init);
        let (params, slots) = build(&config, &mut rng);
        Ok(Self {
            config,
            params,
            slots,
        })
    }

    /// Rebuilds a model from stored `(name, tensor)` pairs, checking names and shapes.
    pub fn from_named(
        config: ModelConfig,
        named: Vec<(String, Tensor)>,
    ) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if named.len() != model.params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            let want = &model.params.tensors[i];
            if name != model.params.name(i) || t.shape() != want.shape() {
                return Err(ModelError::ShapeMismatch(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    model.params.name(i),
                    want.shape(),
                    t.shape()
                )));
            }
            model.params.tensors[i] = t;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn slots(&self) -> &Slots {
        &self.slots
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    pub fn temperature(&self) -> f32 {
        self.params.tensors[self.slots.log_temp].data()[0].exp()
    }

    /// Keeps the learned temperature inside its allowed range.
    pub fn clamp_temperature(&mut self) {
        let (lo, hi) = TEMPERATURE_RANGE;
        let v = &mut self.params.tensors[self.slots.log_temp].data_mut()[0];
        *v = v.clamp(lo.ln(), hi.ln());
    }

    /// Grows the token embedding table to `new_size` rows. New rows are the mean
    /// of the existing rows plus Gaussian noise of standard deviation `noise_std`.
    pub fn resize_vocab(
        &mut self,
        new_size: usize,
        noise_std: f32,
        seed: u64,
    ) -> Result<(), ModelError> {
        let old = self.config.vocab_size;
        if new_size < old {
            return Err(ModelError::InvalidConfig(format!(
                "cannot shrink vocabulary from {old} to {new_size}"
            )));
        }
        let d = self.config.d_model;
        let table = &self.params.tensors[self.slots.tok_emb];
        let mut mean = vec![0.0f64; d];
        for r in 0..old {
            for (m, &v) in mean.iter_mut().zip(table.row(r)) {
                *m += f64::from(v);
            }
        }
        let mut data = table.data().to_vec();
        let mut rng = Rng::new(seed, SeedStream::Noise);
        for _ in old..new_size {
            data.extend(
                mean.iter()
                    .map(|m| (m / old as f64) as f32 + rng.normal() * noise_std),
            );
        }
        self.params.tensors[self.slots.tok_emb] = Tensor::new(&[new_size, d], data)?;
        self.config.vocab_size = new_size;
        Ok(())
    }
}
