//! Backbone × entity-source grid on the entity lookup task.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linker::tokenize;
use crate::model::{random_entity_table, Backbone, DecodeConfig, EntityMode, ModelConfig, Summarizer, TrainConfig};
use crate::synthetic::{SyntheticData, TEAM_TOKEN_INDEX};
use crate::train::{build_vocab, mean_loss, position_accuracy, prepare_corpus, train_summarizer};
use crate::transe::{transe_train, TransEConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: &'static str,
    pub backbone: Backbone,
    pub entity_mode: EntityMode,
}

/// Baseline, random entities, KG entities, and the recurrent KG model.
pub const VARIANTS: [Variant; 4] = [
    Variant {
        name: "baseline",
        backbone: Backbone::Vanilla,
        entity_mode: EntityMode::Off,
    },
    Variant {
        name: "vanilla-random",
        backbone: Backbone::Vanilla,
        entity_mode: EntityMode::Random,
    },
    Variant {
        name: "vanilla-kg",
        backbone: Backbone::Vanilla,
        entity_mode: EntityMode::Kg,
    },
    Variant {
        name: "xl-kg",
        backbone: Backbone::Xl,
        entity_mode: EntityMode::Kg,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub transe: TransEConfig,
}

impl AblationSetup {
    /// Toy-scale settings for the lookup ablation corpus. Names seen fewer
    /// than five times map to UNK, so held-out and training persons look
    /// alike to the token path.
    pub fn toy() -> Self {
        let mut train = TrainConfig::toy();
        train.steps = 600;
        train.vocab_min_count = 5;
        let model = ModelConfig::toy();
        let transe = TransEConfig {
            d_ent: model.d_ent,
            ..TransEConfig::default()
        };
        AblationSetup {
            model,
            train,
            decode: DecodeConfig::toy(),
            transe,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: &'static str,
    pub seed: u64,
    pub heldout_loss: f64,
    pub team_token_acc: f64,
}

/// Trains one variant with one seed and scores it on the held-out persons.
pub fn run_one(data: &SyntheticData, setup: &AblationSetup, variant: &Variant, seed: u64) -> Result<RunResult> {
    if data.valid.is_empty() {
        return Err(Error::Invalid("no held-out pairs".into()));
    }
    let mut cfg = setup.model.clone();
    cfg.backbone = variant.backbone;
    cfg.entity_mode = variant.entity_mode;
    let count = data.kg.entity_count;
    let table = match variant.entity_mode {
        EntityMode::Off => None,
        EntityMode::Random => Some(random_entity_table::<f64>(count, cfg.d_ent, seed)),
        EntityMode::Kg => {
            let tc = TransEConfig {
                d_ent: cfg.d_ent,
                seed,
                ..setup.transe.clone()
            };
            Some(transe_train::<f64>(&data.kg, &tc)?.embeddings.entity_vectors)
        }
    };
    let vocab = build_vocab(&data.train, setup.train.vocab_min_count);
    let mut model = Summarizer::new(cfg, vocab, table, seed)?;
    let g = Some(&data.gazetteer);
    let t = &setup.train;
    let train = prepare_corpus(&model, &data.train, g, t.max_src, t.max_tgt_train, setup.decode.entity_min_tokens)?;
    let valid = prepare_corpus(&model, &data.valid, g, t.max_src, t.max_tgt_eval, setup.decode.entity_min_tokens)?;
    let tc = TrainConfig { seed, ..t.clone() };
    train_summarizer(&mut model, &train, &tc)?;

    let mut team = Vec::with_capacity(valid.len());
    for (ex, pair) in valid.iter().zip(&data.valid) {
        if tokenize(&pair.summary).len() <= TEAM_TOKEN_INDEX {
            return Err(Error::Invalid(format!("summary {:?} has no team token", pair.summary)));
        }
        team.push((ex.clone(), TEAM_TOKEN_INDEX));
    }
    Ok(RunResult {
        variant: variant.name,
        seed,
        heldout_loss: mean_loss(&model, &valid)?,
        team_token_acc: position_accuracy(&model, &team)?,
    })
}

/// Every variant for every seed, variants outermost.
pub fn run_ablation(data: &SyntheticData, setup: &AblationSetup, seeds: &[u64]) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for v in &VARIANTS {
        for &s in seeds {
            out.push(run_one(data, setup, v, s)?);
        }
    }
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_stdev(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Team-token accuracy of one variant over its seeds.
pub fn summary(results: &[RunResult], variant: &str) -> (f64, f64) {
    let accs: Vec<f64> = results
        .iter()
        .filter(|r| r.variant == variant)
        .map(|r| r.team_token_acc)
        .collect();
    mean_stdev(&accs)
}

/// Per-run rows, then a `config,mean,stdev` block over team-token accuracy.
pub fn ablation_csv(results: &[RunResult]) -> String {
    let mut s = String::from("config,seed,heldout_loss,team_token_acc\n");
    for r in results {
        let _ = writeln!(s, "{},{},{:.16e},{:.16e}", r.variant, r.seed, r.heldout_loss, r.team_token_acc);
    }
    s.push_str("config,mean,stdev\n");
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.variant) {
            names.push(r.variant);
        }
    }
    for name in names {
        let (m, sd) = summary(results, name);
        let _ = writeln!(s, "{name},{m:.16e},{sd:.16e}");
    }
    s
}
