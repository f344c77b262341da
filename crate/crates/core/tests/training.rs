use octofunc::decoder::parse_text;
use octofunc::model::{ModelConfig, ParamGroup};
use octofunc::registry::{FunctionalCall, Registry};
use octofunc::tokenizer::Vocabulary;
use octofunc::training::{
    normalize_whitespace, reward, stage_a_pretrain, stage_b_contrastive, stage_c_align,
    stage_d_functional, stage_e_rl, text_tokens, Checkpoint, MetricRecord, PairExample,
    RewardConfig, RlSettings, Stage, StageConfig, TaskItem, TextExample, TrainingError,
    CHECKPOINT_MAGIC,
};
use octofunc::world::{caption_pairs, lm_texts, tasks, Purpose};

fn tiny() -> ModelConfig {
    ModelConfig {
        d_model: 32,
        n_layers: 1,
        n_heads: 2,
        context_len: 128,
        d_img: 16,
        encoder_layers: 1,
        n_prefix: 4,
        ..Default::default()
    }
}

fn cfg(stage: Stage, steps: usize, batch_size: usize, lr: f32) -> StageConfig {
    StageConfig {
        steps,
        batch_size,
        lr,
        log_every: 5,
        ..StageConfig::default_for(stage)
    }
}

fn corpus(n: usize) -> Vec<TextExample> {
    lm_texts(0, n, &Registry::demo())
        .unwrap()
        .iter()
        .map(TextExample::from)
        .collect()
}

fn pairs(purpose: Purpose, n: usize) -> Vec<PairExample> {
    caption_pairs(0, purpose, n)
        .iter()
        .map(|(s, l)| PairExample::from_scene(s, *l))
        .collect()
}

fn items(purpose: Purpose, n: usize, reg: &Registry, vocab: &Vocabulary) -> Vec<TaskItem> {
    tasks(0, purpose, n, reg)
        .unwrap()
        .iter()
        .enumerate()
        .map(|(i, t)| TaskItem::from_example(format!("t{i}"), t, reg, vocab))
        .collect()
}

/// A, B and C run for a few steps each on a tiny model.
fn through_c() -> Checkpoint {
    let mut ck = Checkpoint::initial(tiny(), 0).unwrap();
    stage_a_pretrain(&mut ck, &corpus(40), &cfg(Stage::A, 2, 4, 1e-3)).unwrap();
    stage_b_contrastive(
        &mut ck,
        &pairs(Purpose::Contrastive, 16),
        &cfg(Stage::B, 2, 8, 1e-3),
    )
    .unwrap();
    stage_c_align(
        &mut ck,
        &pairs(Purpose::Alignment, 16),
        &cfg(Stage::C, 2, 4, 1e-3),
    )
    .unwrap();
    ck
}

#[test]
fn zero_steps_leave_parameters_unchanged() {
    let mut ck = Checkpoint::initial(tiny(), 3).unwrap();
    let before = ck.model.params.clone();
    stage_a_pretrain(&mut ck, &corpus(10), &cfg(Stage::A, 0, 4, 1e-3)).unwrap();
    stage_b_contrastive(
        &mut ck,
        &pairs(Purpose::Contrastive, 8),
        &cfg(Stage::B, 0, 4, 1e-3),
    )
    .unwrap();
    stage_c_align(
        &mut ck,
        &pairs(Purpose::Alignment, 8),
        &cfg(Stage::C, 0, 4, 1e-3),
    )
    .unwrap();
    assert!(ck.model.params.bitwise_eq(&before));
    assert_eq!(ck.provenance.len(), 3);
    assert!(ck.provenance.iter().all(|p| p.final_loss.is_none()));

    let reg = Registry::demo();
    ck.extend_vocabulary(&reg, 0).unwrap();
    let extended = ck.model.params.clone();
    let tasks = items(Purpose::Functional, 4, &reg, &ck.vocab);
    stage_d_functional(&mut ck, &tasks, &reg, &cfg(Stage::D, 0, 2, 1e-3)).unwrap();
    stage_e_rl(
        &mut ck,
        &tasks,
        &reg,
        &cfg(Stage::E, 0, 2, 1e-4),
        &RewardConfig::default(),
        &RlSettings::default(),
    )
    .unwrap();
    assert!(ck.model.params.bitwise_eq(&extended));
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let ck = through_c();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert!(back.model.params.bitwise_eq(&ck.model.params));
    assert_eq!(back.provenance, ck.provenance);
    assert_eq!(back.vocab, ck.vocab);
    assert_eq!(back.to_bytes().unwrap(), ck.to_bytes().unwrap());
}

#[test]
fn checkpoint_loader_rejects_bad_files() {
    let ck = Checkpoint::initial(tiny(), 0).unwrap();
    let bytes = ck.to_bytes().unwrap();
    assert_eq!(&bytes[..5], CHECKPOINT_MAGIC);

    let mut v2 = bytes.clone();
    v2[5..9].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(
        Checkpoint::from_bytes(&v2),
        Err(TrainingError::UnsupportedVersion(2))
    ));

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(
        Checkpoint::from_bytes(&magic),
        Err(TrainingError::Checkpoint(_))
    ));
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
        Err(TrainingError::Checkpoint(_))
    ));
}

#[test]
fn frozen_groups_stay_bitwise_identical() {
    let mut ck = Checkpoint::initial(tiny(), 1).unwrap();
    let p0 = ck.model.params.clone();
    stage_a_pretrain(&mut ck, &corpus(40), &cfg(Stage::A, 3, 4, 1e-3)).unwrap();
    assert!(!ck.model.params.group_bitwise_eq(&p0, ParamGroup::Lm));
    for g in [
        ParamGroup::Encoder,
        ParamGroup::Projector,
        ParamGroup::ContrastHead,
        ParamGroup::Temperature,
    ] {
        assert!(
            ck.model.params.group_bitwise_eq(&p0, g),
            "{g:?} moved in stage A"
        );
    }

    let p1 = ck.model.params.clone();
    stage_b_contrastive(
        &mut ck,
        &pairs(Purpose::Contrastive, 16),
        &cfg(Stage::B, 3, 8, 1e-3),
    )
    .unwrap();
    for g in [ParamGroup::Lm, ParamGroup::Projector] {
        assert!(
            ck.model.params.group_bitwise_eq(&p1, g),
            "{g:?} moved in stage B"
        );
    }
    for g in [
        ParamGroup::Encoder,
        ParamGroup::ContrastHead,
        ParamGroup::Temperature,
    ] {
        assert!(
            !ck.model.params.group_bitwise_eq(&p1, g),
            "{g:?} did not train in stage B"
        );
    }

    let p2 = ck.model.params.clone();
    stage_c_align(
        &mut ck,
        &pairs(Purpose::Alignment, 16),
        &cfg(Stage::C, 3, 4, 1e-3),
    )
    .unwrap();
    for g in [
        ParamGroup::Lm,
        ParamGroup::Encoder,
        ParamGroup::ContrastHead,
        ParamGroup::Temperature,
    ] {
        assert!(
            ck.model.params.group_bitwise_eq(&p2, g),
            "{g:?} moved in stage C"
        );
    }
    assert!(!ck.model.params.group_bitwise_eq(&p2, ParamGroup::Projector));
}

#[test]
fn stage_b_refuses_to_train_the_trunk() {
    let mut ck = Checkpoint::initial(tiny(), 0).unwrap();
    let mut c = cfg(Stage::B, 1, 4, 1e-3);
    c.freeze = vec![ParamGroup::Projector];
    assert!(matches!(
        stage_b_contrastive(&mut ck, &pairs(Purpose::Contrastive, 8), &c),
        Err(TrainingError::InvalidConfig(_))
    ));
}

#[test]
fn stage_prerequisites_and_order_are_enforced() {
    let reg = Registry::demo();
    let mut ck = Checkpoint::initial(tiny(), 0).unwrap();
    let aln = pairs(Purpose::Alignment, 8);
    let err = stage_c_align(&mut ck, &aln, &cfg(Stage::C, 1, 4, 1e-3)).unwrap_err();
    assert!(matches!(
        err,
        TrainingError::MissingPrerequisiteStage {
            stage: Stage::C,
            missing: Stage::A
        }
    ));
    stage_a_pretrain(&mut ck, &corpus(8), &cfg(Stage::A, 0, 4, 1e-3)).unwrap();
    let err = stage_c_align(&mut ck, &aln, &cfg(Stage::C, 1, 4, 1e-3)).unwrap_err();
    assert!(matches!(
        err,
        TrainingError::MissingPrerequisiteStage {
            stage: Stage::C,
            missing: Stage::B
        }
    ));

    let mut ck = through_c();
    ck.extend_vocabulary(&reg, 0).unwrap();
    let t = items(Purpose::Rl, 4, &reg, &ck.vocab);
    let err = stage_e_rl(
        &mut ck,
        &t,
        &reg,
        &cfg(Stage::E, 1, 2, 1e-5),
        &RewardConfig::default(),
        &RlSettings::default(),
    )
    .unwrap_err();
    assert!(matches!(
        err,
        TrainingError::MissingPrerequisiteStage {
            stage: Stage::E,
            missing: Stage::D
        }
    ));

    let err = stage_a_pretrain(&mut ck, &corpus(8), &cfg(Stage::A, 1, 4, 1e-3)).unwrap_err();
    assert!(matches!(
        err,
        TrainingError::StageOrder {
            stage: Stage::A,
            last: Stage::C
        }
    ));
}

#[test]
fn wrong_inputs_are_rejected() {
    let mut ck = Checkpoint::initial(tiny(), 0).unwrap();
    assert!(matches!(
        stage_a_pretrain(&mut ck, &[], &cfg(Stage::A, 1, 4, 1e-3)),
        Err(TrainingError::EmptyCorpus)
    ));
    assert!(matches!(
        stage_b_contrastive(
            &mut ck,
            &pairs(Purpose::Contrastive, 1),
            &cfg(Stage::B, 1, 8, 1e-3)
        ),
        Err(TrainingError::BatchTooSmall(1))
    ));
    assert!(matches!(
        stage_a_pretrain(&mut ck, &corpus(4), &cfg(Stage::B, 1, 4, 1e-3)),
        Err(TrainingError::InvalidConfig(_))
    ));

    let reg = Registry::demo();
    let vocab = Vocabulary::new()
        .extend_with_functional_tokens(reg.len())
        .unwrap();
    let mut ck = through_c();
    let t = items(Purpose::Functional, 4, &reg, &vocab);
    assert!(matches!(
        stage_d_functional(&mut ck, &t, &reg, &cfg(Stage::D, 1, 2, 1e-3)),
        Err(TrainingError::VocabularyNotExtended)
    ));
}

#[test]
fn rl_learning_rate_is_capped_by_stage_d() {
    let reg = Registry::demo();
    let mut ck = through_c();
    ck.extend_vocabulary(&reg, 0).unwrap();
    let t = items(Purpose::Functional, 8, &reg, &ck.vocab);
    stage_d_functional(&mut ck, &t, &reg, &cfg(Stage::D, 2, 4, 1e-3)).unwrap();
    let err = stage_e_rl(
        &mut ck,
        &t,
        &reg,
        &cfg(Stage::E, 1, 2, 2e-4),
        &RewardConfig::default(),
        &RlSettings::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TrainingError::InvalidConfig(_)));

    let rl = RlSettings {
        max_new_tokens: 24,
        ..RlSettings::default()
    };
    let report = stage_e_rl(
        &mut ck,
        &t,
        &reg,
        &cfg(Stage::E, 2, 2, 1e-4),
        &RewardConfig::default(),
        &rl,
    )
    .unwrap();
    for m in &report.metrics {
        let r = m.reward.expect("stage E logs rewards");
        assert!((0.0..=1.0).contains(&r));
    }
    assert_eq!(ck.last_stage(), Some(Stage::E));
}

#[test]
fn short_pretraining_lowers_the_loss() {
    let mut ck = Checkpoint::initial(tiny(), 2).unwrap();
    let report = stage_a_pretrain(&mut ck, &corpus(200), &cfg(Stage::A, 40, 8, 3e-3)).unwrap();
    let first = report.metrics.first().unwrap().loss;
    let last = report.final_loss.unwrap();
    // an untrained model is close to uniform over the base vocabulary
    assert!(
        (first - (ck.vocab.size() as f32).ln()).abs() < 0.5,
        "initial loss {first}"
    );
    assert!(last < 0.75 * first, "{first} -> {last}");
}

#[test]
fn contrastive_temperature_stays_clamped() {
    let mut ck = Checkpoint::initial(tiny(), 0).unwrap();
    stage_b_contrastive(
        &mut ck,
        &pairs(Purpose::Contrastive, 32),
        &cfg(Stage::B, 30, 16, 0.5),
    )
    .unwrap();
    let t = ck.model.temperature();
    assert!((0.01..=1.0).contains(&t), "temperature {t}");
}

#[test]
fn functional_tokens_start_near_uniform() {
    let reg = Registry::demo();
    let mut ck = Checkpoint::initial(ModelConfig::default(), 0).unwrap();
    ck.extend_vocabulary(&reg, 0).unwrap();
    let t = items(Purpose::Eval, 5, &reg, &ck.vocab);
    for item in &t {
        let prefix = ck.model.image_prefix(&item.pixels).unwrap();
        let logits = ck.model.lm_forward(Some(&prefix), &item.prompt).unwrap();
        let last = logits.row(item.prompt.len() - 1);
        let max = last
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, |m, v| m.max(f64::from(v)));
        let z: f64 = last.iter().map(|&v| (f64::from(v) - max).exp()).sum();
        let probs: Vec<f64> = (0..reg.len())
            .map(|i| (f64::from(last[ck.vocab.functional_id(i).unwrap() as usize]) - max).exp() / z)
            .collect();
        let spread = probs.iter().cloned().fold(f64::MIN, f64::max)
            - probs.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 0.05, "spread {spread}");
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = through_c().to_bytes().unwrap();
    let b = through_c().to_bytes().unwrap();
    assert_eq!(a, b);
}

#[test]
fn learning_rate_warms_up_then_decays_to_a_tenth() {
    let c = cfg(Stage::D, 1000, 4, 1e-3);
    assert!(c.lr_at(0) < c.lr_at(50));
    assert!((c.lr_at(99) - 1e-3).abs() < 1e-9);
    assert!((c.lr_at(999) - 1e-4).abs() < 1e-6);
    assert!((1..1000).all(|s| s < 100 || c.lr_at(s) <= c.lr_at(s - 1)));
}

fn call(text: &str, reg: &Registry, vocab: &Vocabulary) -> FunctionalCall {
    parse_text(text, vocab, reg).unwrap()
}

#[test]
fn reward_follows_its_formula() {
    let reg = Registry::demo();
    let vocab = Vocabulary::new()
        .extend_with_functional_tokens(reg.len())
        .unwrap();
    let rc = RewardConfig::default();
    let oracle = call("animal_care('the cat', 'grooming')<nexa_end>", &reg, &vocab);
    let r = |text: &str| reward(text, &oracle, &rc, &reg, &vocab);
    assert_eq!(r("animal_care('the cat', 'grooming')<nexa_end>"), 1.0);
    assert_eq!(r("animal_care('the  cat ', 'grooming')<nexa_end>"), 1.0);
    assert!((r("animal_care('the cat', 'feeding')<nexa_end>") - 0.8).abs() < 1e-6);
    assert!((r("animal_care('a dog', 'feeding')<nexa_end>") - 0.6).abs() < 1e-6);
    assert_eq!(r("google_search('the cat')<nexa_end>"), 0.0);
    assert_eq!(r("animal_care('the cat'"), 0.0);
    assert_eq!(r("animal_care('the cat', 'bathing')<nexa_end>"), 0.0);
    let lenient = RewardConfig {
        parse_failure_reward: 0.1,
        ..rc
    };
    assert_eq!(reward("garbage", &oracle, &lenient, &reg, &vocab), 0.1);
    assert!(RewardConfig { w_func: 0.7, ..rc }.check().is_err());
}

#[test]
fn whitespace_normalization_collapses_runs() {
    assert_eq!(normalize_whitespace("  a \t b\n\nc "), "a b c");
    assert_eq!(normalize_whitespace(""), "");
}

#[test]
fn metric_records_serialize_as_flat_json() {
    let m = MetricRecord {
        step: 3,
        stage: Stage::D,
        loss: 0.5,
        lr: 1e-3,
        reward: None,
    };
    let v: serde_json::Value = serde_json::to_value(&m).unwrap();
    assert_eq!(v["step"], 3);
    assert_eq!(v["stage"], "D");
    assert!(v.get("reward").is_none());
}

#[test]
fn text_tokens_are_raw_bytes_between_markers() {
    let vocab = Vocabulary::new();
    let t = text_tokens("<eos>");
    assert_eq!(t.len(), 7);
    assert_eq!(
        &t[1..6],
        "<eos>"
            .bytes()
            .map(u32::from)
            .collect::<Vec<_>>()
            .as_slice()
    );
    assert_eq!(vocab.decode(&t).unwrap(), "<bos><eos><eos>");
}
