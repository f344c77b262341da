//! The seed-0 training pipeline behind criteria 5 to 10.

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use octofunc::agent::{evaluate, record_outputs, EvalReport};
use octofunc::model::{GenerationConfig, ModelConfig};
use octofunc::registry::Registry;
use octofunc::tokenizer::Vocabulary;
use octofunc::training::{
    retrieval_top1, stage_a_pretrain, stage_b_contrastive, stage_c_align, stage_d_functional,
    stage_e_rl, Checkpoint, PairExample, RewardConfig, RlSettings, Stage, StageConfig, StageReport,
    TaskItem, TextExample,
};
use octofunc::world::{caption_pairs, lm_texts, tasks, Purpose, TEMPLATE_SOURCE};
use serde::Serialize;

const SEED: u64 = 0;
const EVAL_TASKS: usize = 500;
const GALLERY: usize = 64;

#[derive(Serialize)]
struct Spec {
    lm_lines: usize,
    contrastive_pairs: usize,
    alignment_pairs: usize,
    functional_tasks: usize,
    rl_prompts: usize,
    stages: Vec<StageConfig>,
    rl: RlSettings,
}

impl Spec {
    fn reference() -> Self {
        let d = octofunc::world::DatasetConfig::default();
        Self {
            lm_lines: d.lm_lines,
            contrastive_pairs: d.contrastive_pairs,
            alignment_pairs: d.alignment_pairs,
            functional_tasks: d.functional_tasks,
            rl_prompts: d.rl_prompts,
            stages: Stage::ALL
                .iter()
                .map(|&s| StageConfig {
                    seed: SEED,
                    ..StageConfig::default_for(s)
                })
                .collect(),
            rl: RlSettings::default(),
        }
    }

    fn short() -> Self {
        let steps = [
            (Stage::A, 20, 8),
            (Stage::B, 20, 16),
            (Stage::C, 10, 8),
            (Stage::D, 20, 8),
            (Stage::E, 3, 2),
        ];
        Self {
            lm_lines: 200,
            contrastive_pairs: 64,
            alignment_pairs: 64,
            functional_tasks: 64,
            rl_prompts: 16,
            stages: steps
                .iter()
                .map(|&(s, steps, batch_size)| StageConfig {
                    seed: SEED,
                    steps,
                    batch_size,
                    ..StageConfig::default_for(s)
                })
                .collect(),
            rl: RlSettings {
                max_new_tokens: 48,
                ..RlSettings::default()
            },
        }
    }

    fn key(&self) -> String {
        let mut h = DefaultHasher::new();
        serde_json::to_string(self).unwrap().hash(&mut h);
        TEMPLATE_SOURCE.hash(&mut h);
        env!("CARGO_PKG_VERSION").hash(&mut h);
        format!("{:016x}", h.finish())
    }
}

pub fn eval_items(n: usize, registry: &Registry, vocab: &Vocabulary) -> Vec<TaskItem> {
    tasks(SEED, Purpose::Eval, n, registry)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, t)| TaskItem::from_example(format!("eval-{i}"), t, registry, vocab))
        .collect()
}

fn pairs(purpose: Purpose, n: usize) -> Vec<PairExample> {
    caption_pairs(SEED, purpose, n)
        .iter()
        .map(|(s, l)| PairExample::from_scene(s, *l))
        .collect()
}

fn run_stage(ckpt: &mut Checkpoint, spec: &Spec, stage: Stage, registry: &Registry) -> StageReport {
    let cfg = &spec.stages[stage as usize];
    let tasks_for = |ckpt: &Checkpoint, purpose, n| -> Vec<TaskItem> {
        tasks(SEED, purpose, n, registry)
            .unwrap()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                TaskItem::from_example(format!("{purpose:?}-{i}"), t, registry, &ckpt.vocab)
            })
            .collect()
    };
    match stage {
        Stage::A => {
            let corpus: Vec<TextExample> = lm_texts(SEED, spec.lm_lines, registry)
                .unwrap()
                .iter()
                .map(TextExample::from)
                .collect();
            stage_a_pretrain(ckpt, &corpus, cfg)
        }
        Stage::B => stage_b_contrastive(
            ckpt,
            &pairs(Purpose::Contrastive, spec.contrastive_pairs),
            cfg,
        ),
        Stage::C => stage_c_align(ckpt, &pairs(Purpose::Alignment, spec.alignment_pairs), cfg),
        Stage::D => {
            ckpt.extend_vocabulary(registry, SEED).unwrap();
            let items = tasks_for(ckpt, Purpose::Functional, spec.functional_tasks);
            stage_d_functional(ckpt, &items, registry, cfg)
        }
        Stage::E => {
            let items = tasks_for(ckpt, Purpose::Rl, spec.rl_prompts);
            stage_e_rl(
                ckpt,
                &items,
                registry,
                cfg,
                &RewardConfig::default(),
                &spec.rl,
            )
        }
    }
    .unwrap_or_else(|e| panic!("stage {stage} failed: {e}"))
}

fn eval(ckpt: &Checkpoint, n: usize, registry: &Registry) -> EvalReport {
    let items = eval_items(n, registry, &ckpt.vocab);
    let outputs = record_outputs(
        &ckpt.model,
        &items,
        registry,
        &ckpt.vocab,
        &GenerationConfig::default(),
        SEED,
    )
    .unwrap();
    evaluate(
        &outputs,
        &items,
        registry,
        &ckpt.vocab,
        &RewardConfig::default(),
    )
    .unwrap()
}

pub struct Pipeline {
    pub retrieval: f32,
    pub eval_d: EvalReport,
    pub eval_e: EvalReport,
    /// Training seconds per stage, as measured when the stage actually ran.
    pub seconds: BTreeMap<String, f64>,
    pub final_checkpoint: Checkpoint,
}

fn cache_dir() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

/// Runs (or reloads) every stage of the reference pipeline and measures it.
pub fn reference_run() -> Pipeline {
    let spec = Spec::reference();
    let registry = Registry::demo();
    let dir = cache_dir();
    std::fs::create_dir_all(&dir).unwrap();
    let key = spec.key();
    let fresh = std::env::var_os("OCTOFUNC_ACCEPTANCE_FRESH").is_some_and(|v| v != "0");
    let times_path = dir.join(format!("{key}-seconds.json"));
    let mut seconds: BTreeMap<String, f64> = if fresh {
        BTreeMap::new()
    } else {
        std::fs::read(&times_path)
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    };

    let mut ckpt = Checkpoint::initial(ModelConfig::default(), SEED).unwrap();
    let mut snapshots = BTreeMap::new();
    for stage in Stage::ALL {
        let path = dir.join(format!("{key}-{stage}.octo3"));
        let cached = if fresh || !seconds.contains_key(&stage.to_string()) {
            None
        } else {
            Checkpoint::load(&path).ok()
        };
        match cached {
            Some(c) => {
                eprintln!("acceptance: stage {stage} loaded from {}", path.display());
                ckpt = c;
            }
            None => {
                eprintln!("acceptance: training stage {stage}");
                let report = run_stage(&mut ckpt, &spec, stage, &registry);
                eprintln!(
                    "acceptance: stage {stage} took {:.0}s, final loss {:?}",
                    report.seconds, report.final_loss
                );
                ckpt.save(&path).unwrap();
                seconds.insert(stage.to_string(), report.seconds);
                std::fs::write(&times_path, serde_json::to_vec(&seconds).unwrap()).unwrap();
            }
        }
        if matches!(stage, Stage::B | Stage::D) {
            snapshots.insert(stage, ckpt.clone());
        }
    }
    let gallery = pairs(Purpose::EvalPairs, GALLERY);
    let retrieval = retrieval_top1(&snapshots[&Stage::B].model, &gallery).unwrap();
    let eval_d = eval(&snapshots[&Stage::D], EVAL_TASKS, &registry);
    let eval_e = eval(&ckpt, EVAL_TASKS, &registry);
    Pipeline {
        retrieval,
        eval_d,
        eval_e,
        seconds,
        final_checkpoint: ckpt,
    }
}

pub struct ShortRun {
    pub checkpoint: Vec<u8>,
    pub report: EvalReport,
}

/// All five stages with small data and few steps, never cached.
pub fn short_run() -> ShortRun {
    let spec = Spec::short();
    let registry = Registry::demo();
    let mut ckpt = Checkpoint::initial(ModelConfig::default(), SEED).unwrap();
    for stage in Stage::ALL {
        run_stage(&mut ckpt, &spec, stage, &registry);
    }
    ShortRun {
        checkpoint: ckpt.to_bytes().unwrap(),
        report: eval(&ckpt, 40, &registry),
    }
}
