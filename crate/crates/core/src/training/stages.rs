use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, ProvenanceEntry};
use super::data::{PairExample, TaskItem, TextExample};
use super::reward::{reward, RewardConfig};
use super::{Stage, StageConfig, TrainingError};
use crate::model::{Bound, Constraint, DecodeMode, GenerationConfig, LmInput, Model, ParamGroup};
use crate::numerics::{AdamConfig, AdamState, Graph, NodeId, Rng, SeedStream, Tensor};
use crate::registry::Registry;
use crate::tokenizer::IMG;

/// Global gradient-norm ceiling applied before every optimizer step.
const GRAD_CLIP: f32 = 1.0;
/// Sequences per graph when running the frozen text trunk.
const FEATURE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f32,
    pub lr: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reward: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub metrics: Vec<MetricRecord>,
    pub final_loss: Option<f32>,
    pub seconds: f64,
}

/// Epoch-wise shuffled index stream.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed, SeedStream::Batches);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        Self { order, pos: 0, rng }
    }

    fn next(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Clipped gradient step on every trainable tensor that received a gradient.
fn apply_gradients(
    model: &mut Model,
    g: &Graph,
    loss: NodeId,
    adam: &mut AdamState,
    trainable: &[bool],
    lr: f32,
) -> Result<(), TrainingError> {
    let grads = g.backward(loss)?;
    let norm_sq: f64 = grads
        .params()
        .flat_map(|(_, gr)| gr.iter())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum();
    let norm = norm_sq.sqrt() as f32;
    if !norm.is_finite() {
        return Err(TrainingError::InvalidConfig(
            "gradient became non-finite; lower the learning rate".into(),
        ));
    }
    let scale = if norm > GRAD_CLIP {
        GRAD_CLIP / norm
    } else {
        1.0
    };
    for (i, gr) in grads.params() {
        let t = &mut model.params.tensors[i];
        t.clear_grad();
        t.accumulate_grad(&gr.iter().map(|v| v * scale).collect::<Vec<_>>());
    }
    adam.config.lr = lr;
    adam.step(&mut model.params.tensors, trainable)?;
    for t in &mut model.params.tensors {
        t.clear_grad();
    }
    Ok(())
}

/// Runs `cfg.steps` optimizer steps; `build` returns the loss node and an
/// optional mean reward for the step.
fn train_loop<F>(
    ckpt: &mut Checkpoint,
    cfg: &StageConfig,
    mut build: F,
) -> Result<StageReport, TrainingError>
where
    F: FnMut(&Model, &mut Graph, &Bound, usize) -> Result<(NodeId, Option<f32>), TrainingError>,
{
    let start = Instant::now();
    let trainable = ckpt.model.params.trainable_mask(&cfg.freeze);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &ckpt.model.params.tensors,
    );
    let mut metrics = Vec::new();
    let mut final_loss = None;
    for step in 0..cfg.steps {
        let lr = cfg.lr_at(step);
        let mut g = Graph::new();
        let p = ckpt.model.bind(&mut g, &trainable);
        let (loss, reward) = build(&ckpt.model, &mut g, &p, step)?;
        let value = g.value(loss).item();
        apply_gradients(&mut ckpt.model, &g, loss, &mut adam, &trainable, lr)?;
        if cfg.stage == Stage::B {
            ckpt.model.clamp_temperature();
        }
        final_loss = Some(value);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            metrics.push(MetricRecord {
                step,
                stage: cfg.stage,
                loss: value,
                lr,
                reward,
            });
        }
    }
    ckpt.record(ProvenanceEntry {
        stage: cfg.stage,
        config: cfg.clone(),
        final_loss,
    })?;
    Ok(StageReport {
        stage: cfg.stage,
        metrics,
        final_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn clip_context(tokens: &[u32], limit: usize) -> &[u32] {
    &tokens[..tokens.len().min(limit)]
}

/// Next-token loss over whole text sequences.
fn text_nll(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    texts: &[&[u32]],
) -> Result<NodeId, TrainingError> {
    let limit = model.config().context_len;
    let texts: Vec<&[u32]> = texts.iter().map(|t| clip_context(t, limit)).collect();
    let seqs: Vec<LmInput> = texts
        .iter()
        .map(|t| LmInput {
            prefix: None,
            tokens: t,
        })
        .collect();
    let out = model.lm_hidden(g, p, &seqs)?;
    let (mut rows, mut targets) = (Vec::new(), Vec::new());
    for (s, t) in texts.iter().enumerate() {
        for j in 0..t.len().saturating_sub(1) {
            rows.push(out.row(s, j));
            targets.push(t[j + 1] as usize);
        }
    }
    if rows.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let logits = model.logits_graph(g, p, out.hidden, &rows)?;
    let n = rows.len();
    Ok(g.token_nll(logits, &targets, &vec![1.0; n], n as f32)?)
}

/// One image-conditioned sequence: `tokens[0]` is `<img>`, and positions from
/// `score_from` on are scored with `weight`.
struct Conditioned<'a> {
    image: usize,
    tokens: &'a [u32],
    score_from: usize,
    weight: f32,
}

/// Weighted next-token loss over image-conditioned sequences, divided by `denom`.
fn conditioned_nll(
    model: &Model,
    g: &mut Graph,
    p: &Bound,
    images: &[&[f32]],
    seqs: &[Conditioned],
    denom: f32,
) -> Result<NodeId, TrainingError> {
    let n_prefix = model.config().n_prefix;
    // the prefix stands in for `<img>`, so n_prefix - 1 extra positions are taken
    let limit = model.config().context_len + 1 - n_prefix;
    let embs = model.encode_images_graph(g, p, images)?;
    let all = model.project_graph(g, p, embs)?;
    let prefixes: Vec<NodeId> = (0..images.len())
        .map(|i| g.gather_rows(all, &(i * n_prefix..(i + 1) * n_prefix).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    let inputs: Vec<LmInput> = seqs
        .iter()
        .map(|s| {
            debug_assert_eq!(s.tokens.first(), Some(&IMG));
            LmInput {
                prefix: Some(prefixes[s.image]),
                tokens: clip_context(s.tokens, limit),
            }
        })
        .collect();
    let out = model.lm_hidden(g, p, &inputs)?;
    let (mut rows, mut targets, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for (k, s) in seqs.iter().enumerate() {
        for r in s.score_from.max(1)..s.tokens.len().min(limit) {
            rows.push(out.row(k, r - 1));
            targets.push(s.tokens[r] as usize);
            weights.push(s.weight);
        }
    }
    if rows.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let logits = model.logits_graph(g, p, out.hidden, &rows)?;
    Ok(g.token_nll(logits, &targets, &weights, denom)?)
}

/// Stage A: next-token pretraining of the language model on plain text.
pub fn stage_a_pretrain(
    ckpt: &mut Checkpoint,
    corpus: &[TextExample],
    cfg: &StageConfig,
) -> Result<StageReport, TrainingError> {
    cfg.check(Stage::A)?;
    if corpus.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    ckpt.check_can_run(Stage::A)?;
    let mut batches = Batcher::new(corpus.len(), cfg.seed);
    train_loop(ckpt, cfg, |model, g, p, _| {
        let idx = batches.next(cfg.batch_size);
        let texts: Vec<&[u32]> = idx.iter().map(|&i| corpus[i].tokens.as_slice()).collect();
        Ok((text_nll(model, g, p, &texts)?, None))
    })
}

/// Mean final LM features of each text under the current (frozen) trunk.
fn text_features(model: &Model, texts: &[&[u32]]) -> Result<Vec<f32>, TrainingError> {
    let limit = model.config().context_len;
    let mut out = Vec::with_capacity(texts.len() * model.config().d_model);
    for chunk in texts.chunks(FEATURE_CHUNK) {
        let mut g = Graph::new();
        let p = model.bind(&mut g, &[]);
        let clipped: Vec<&[u32]> = chunk.iter().map(|t| clip_context(t, limit)).collect();
        let f = model.text_features_graph(&mut g, &p, &clipped)?;
        out.extend_from_slice(g.value(f).data());
    }
    Ok(out)
}

/// Stage B: contrastive training of the image encoder, the text contrast head
/// and the temperature. The LM trunk is frozen, so its caption features are
/// computed once up front.
pub fn stage_b_contrastive(
    ckpt: &mut Checkpoint,
    pairs: &[PairExample],
    cfg: &StageConfig,
) -> Result<StageReport, TrainingError> {
    cfg.check(Stage::B)?;
    if !cfg.freeze.contains(&ParamGroup::Lm) {
        return Err(TrainingError::InvalidConfig(
            "stage B keeps the LM trunk frozen".into(),
        ));
    }
    let batch = cfg.batch_size.min(pairs.len());
    if batch < 2 {
        return Err(TrainingError::BatchTooSmall(batch));
    }
    ckpt.check_can_run(Stage::B)?;
    let d = ckpt.model.config().d_model;
    let texts: Vec<&[u32]> = pairs.iter().map(|p| p.tokens.as_slice()).collect();
    let features = text_features(&ckpt.model, &texts)?;
    let mut batches = Batcher::new(pairs.len(), cfg.seed);
    train_loop(ckpt, cfg, |model, g, p, _| {
        let idx = batches.next(batch);
        let images: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].pixels.as_slice()).collect();
        let img = model.encode_images_graph(g, p, &images)?;
        let mut f = Vec::with_capacity(batch * d);
        for &i in &idx {
            f.extend_from_slice(&features[i * d..(i + 1) * d]);
        }
        let f = g.constant(Tensor::new(&[batch, d], f)?);
        let txt = model.contrast_head_graph(g, p, f)?;
        let log_temp = p.node(model.slots().log_temp);
        Ok((Model::contrastive_loss_graph(g, img, txt, log_temp)?, None))
    })
}

/// Image→caption top-1 retrieval accuracy over `pairs` as a gallery. A hit is
/// a retrieved caption identical to the true one.
pub fn retrieval_top1(model: &Model, pairs: &[PairExample]) -> Result<f32, TrainingError> {
    if pairs.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let mut g = Graph::new();
    let p = model.bind(&mut g, &[]);
    let images: Vec<&[f32]> = pairs.iter().map(|x| x.pixels.as_slice()).collect();
    let img = model.encode_images_graph(&mut g, &p, &images)?;
    let texts: Vec<&[u32]> = pairs.iter().map(|x| x.tokens.as_slice()).collect();
    let feats = text_features(model, &texts)?;
    let f = g.constant(Tensor::new(&[pairs.len(), model.config().d_model], feats)?);
    let txt = model.contrast_head_graph(&mut g, &p, f)?;
    let sims = g.matmul_nt(img, txt)?;
    let sims = g.value(sims);
    let mut hits = 0;
    for i in 0..pairs.len() {
        let row = sims.row(i);
        let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        hits += usize::from(pairs[best].caption == pairs[i].caption);
    }
    Ok(hits as f32 / pairs.len() as f32)
}

fn caption_sequence(pair: &PairExample) -> Vec<u32> {
    let mut s = vec![IMG];
    s.extend_from_slice(&pair.tokens);
    s
}

/// Stage C: trains the projector alone on captions conditioned on the image prefix.
pub fn stage_c_align(
    ckpt: &mut Checkpoint,
    pairs: &[PairExample],
    cfg: &StageConfig,
) -> Result<StageReport, TrainingError> {
    cfg.check(Stage::C)?;
    for needed in [Stage::A, Stage::B] {
        if !ckpt.has_stage(needed) {
            return Err(TrainingError::MissingPrerequisiteStage {
                stage: Stage::C,
                missing: needed,
            });
        }
    }
    if pairs.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    ckpt.check_can_run(Stage::C)?;
    let seqs: Vec<Vec<u32>> = pairs.iter().map(caption_sequence).collect();
    let mut batches = Batcher::new(pairs.len(), cfg.seed);
    train_loop(ckpt, cfg, |model, g, p, _| {
        let idx = batches.next(cfg.batch_size);
        let images: Vec<&[f32]> = idx.iter().map(|&i| pairs[i].pixels.as_slice()).collect();
        let batch: Vec<Conditioned> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| Conditioned {
                image: k,
                tokens: &seqs[i],
                score_from: 2,
                weight: 1.0,
            })
            .collect();
        let n: usize = batch.iter().map(|c| c.tokens.len() - 2).sum();
        Ok((
            conditioned_nll(model, g, p, &images, &batch, n as f32)?,
            None,
        ))
    })
}

/// Mean caption-token loss of `pair.caption` given `pixels` as the image.
pub fn caption_loss(
    model: &Model,
    pixels: &[f32],
    pair: &PairExample,
) -> Result<f32, TrainingError> {
    let seq = caption_sequence(pair);
    let mut g = Graph::new();
    let p = model.bind(&mut g, &[]);
    let n = (seq.len() - 2) as f32;
    let c = [Conditioned {
        image: 0,
        tokens: &seq,
        score_from: 2,
        weight: 1.0,
    }];
    let loss = conditioned_nll(model, &mut g, &p, &[pixels], &c, n)?;
    Ok(g.value(loss).item())
}

/// Fraction of pairs whose caption is cheaper under their own image than
/// under the next pair's image.
pub fn image_sensitivity(model: &Model, pairs: &[PairExample]) -> Result<f32, TrainingError> {
    if pairs.len() < 2 {
        return Err(TrainingError::BatchTooSmall(pairs.len()));
    }
    let mut wins = 0;
    for (i, pair) in pairs.iter().enumerate() {
        let other = &pairs[(i + 1) % pairs.len()].pixels;
        wins += usize::from(
            caption_loss(model, &pair.pixels, pair)? < caption_loss(model, other, pair)?,
        );
    }
    Ok(wins as f32 / pairs.len() as f32)
}

fn require_extended(ckpt: &Checkpoint, registry: &Registry) -> Result<(), TrainingError> {
    if !registry.is_frozen() || !ckpt.is_extended_for(registry) {
        return Err(TrainingError::VocabularyNotExtended);
    }
    Ok(())
}

/// Stage D: fine-tunes the whole model on (image, query) → call, scoring
/// only the response tokens.
pub fn stage_d_functional(
    ckpt: &mut Checkpoint,
    tasks: &[TaskItem],
    registry: &Registry,
    cfg: &StageConfig,
) -> Result<StageReport, TrainingError> {
    cfg.check(Stage::D)?;
    require_extended(ckpt, registry)?;
    if tasks.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    ckpt.check_can_run(Stage::D)?;
    let seqs: Vec<Vec<u32>> = tasks.iter().map(TaskItem::sequence).collect();
    let mut batches = Batcher::new(tasks.len(), cfg.seed);
    train_loop(ckpt, cfg, |model, g, p, _| {
        let idx = batches.next(cfg.batch_size);
        let images: Vec<&[f32]> = idx.iter().map(|&i| tasks[i].pixels.as_slice()).collect();
        let batch: Vec<Conditioned> = idx
            .iter()
            .enumerate()
            .map(|(k, &i)| Conditioned {
                image: k,
                tokens: &seqs[i],
                score_from: tasks[i].prompt.len(),
                weight: 1.0,
            })
            .collect();
        let n: usize = idx.iter().map(|&i| tasks[i].response.len()).sum();
        Ok((
            conditioned_nll(model, g, p, &images, &batch, n as f32)?,
            None,
        ))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlSettings {
    pub samples_per_prompt: usize,
    pub temperature: f32,
    pub baseline_momentum: f32,
    pub max_new_tokens: usize,
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            temperature: 1.0,
            baseline_momentum: 0.9,
            max_new_tokens: 128,
        }
    }
}

/// Stage E: REINFORCE against the oracle reward. Each prompt gets
/// `samples_per_prompt` unconstrained samples; the advantage is the reward
/// minus a running-mean baseline, and the surrogate loss is the
/// advantage-weighted negative log-likelihood of the sampled tokens.
pub fn stage_e_rl(
    ckpt: &mut Checkpoint,
    prompts: &[TaskItem],
    registry: &Registry,
    cfg: &StageConfig,
    reward_config: &RewardConfig,
    rl: &RlSettings,
) -> Result<StageReport, TrainingError> {
    cfg.check(Stage::E)?;
    reward_config.check()?;
    let Some(d) = ckpt.provenance.iter().rev().find(|p| p.stage == Stage::D) else {
        return Err(TrainingError::MissingPrerequisiteStage {
            stage: Stage::E,
            missing: Stage::D,
        });
    };
    if cfg.lr > 0.1 * d.config.lr * (1.0 + 1e-6) {
        return Err(TrainingError::InvalidConfig(format!(
            "stage E learning rate {} exceeds a tenth of stage D's {}",
            cfg.lr, d.config.lr
        )));
    }
    if rl.samples_per_prompt == 0
        || !(rl.temperature > 0.0)
        || !(0.0..1.0).contains(&rl.baseline_momentum)
    {
        return Err(TrainingError::InvalidConfig(format!("{rl:?}")));
    }
    require_extended(ckpt, registry)?;
    if prompts.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    ckpt.check_can_run(Stage::E)?;
    let vocab = ckpt.vocab.clone();
    let gen = GenerationConfig {
        mode: DecodeMode::Sample {
            temperature: rl.temperature,
        },
        max_new_tokens: rl.max_new_tokens,
        constraint: Constraint::Off,
    };
    let mut batches = Batcher::new(prompts.len(), cfg.seed);
    let mut sampler = Rng::new(cfg.seed, SeedStream::Sampling);
    let mut baseline: Option<f32> = None;
    train_loop(ckpt, cfg, |model, g, p, _| {
        let idx = batches.next(cfg.batch_size);
        let mut samples: Vec<(usize, Vec<u32>, f32)> = Vec::new();
        for (k, &i) in idx.iter().enumerate() {
            let task = &prompts[i];
            for _ in 0..rl.samples_per_prompt {
                let out =
                    model.generate(Some(&task.pixels), &task.prompt, &gen, None, &mut sampler)?;
                let text = vocab.decode(&out)?;
                let r = reward(&text, &task.target, reward_config, registry, &vocab);
                let mut seq = task.prompt.clone();
                seq.extend_from_slice(&out);
                samples.push((k, seq, r));
            }
        }
        let mean = samples.iter().map(|s| s.2).sum::<f32>() / samples.len() as f32;
        let b = *baseline.get_or_insert(mean);
        baseline = Some(rl.baseline_momentum * b + (1.0 - rl.baseline_momentum) * mean);
        let images: Vec<&[f32]> = idx.iter().map(|&i| prompts[i].pixels.as_slice()).collect();
        let batch: Vec<Conditioned> = samples
            .iter()
            .map(|(k, seq, r)| Conditioned {
                image: *k,
                tokens: seq,
                score_from: prompts[idx[*k]].prompt.len(),
                weight: r - b,
            })
            .collect();
        let loss = conditioned_nll(model, g, p, &images, &batch, samples.len() as f32)?;
        Ok((loss, Some(mean)))
    })
}
