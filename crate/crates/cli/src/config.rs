use std::path::Path;

use anyhow::Context;
use esc_core::eval::GenerationConfig;
use esc_core::model::ModelConfig;
use esc_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::{GenerationFlags, ModelSize, TrainArgs};

/// Values from the optional config file; command-line flags win.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generation: GenerationConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub fn parse_gamma(s: &str) -> Result<[f64; 4], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated weights, got {}", v.len()))
}

pub fn parse_ratio(s: &str) -> Result<[u32; 3], String> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse::<u32>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let ratio: [u32; 3] = parts
        .try_into()
        .map_err(|v: Vec<u32>| format!("expected train:dev:test, got {} parts", v.len()))?;
    if ratio.iter().all(|&r| r == 0) {
        return Err("ratio must not be all zero".into());
    }
    Ok(ratio)
}

pub fn apply_train_flags(file: &FileConfig, a: &TrainArgs) -> (ModelConfig, TrainConfig) {
    let mut model = match a.model_size {
        Some(ModelSize::Tiny) => ModelConfig::tiny(0),
        Some(ModelSize::Desk) => ModelConfig::desk(0),
        Some(ModelSize::Large) => ModelConfig::large(0),
        None => file.model.clone(),
    };
    if let Some(d) = a.d_model {
        model.d_model = d;
        model.ffn_dim = 4 * d;
    }
    if let Some(l) = a.layers {
        model.encoder_layers = l;
        model.decoder_layers = l;
    }
    if let Some(p) = a.dropout {
        model.dropout = p;
    }
    if let Some(b) = a.teacher_force_strategy {
        model.teacher_force_strategy = b;
    }
    if let Some(b) = a.keyword_loss_on_placeholder {
        model.keyword_loss_on_placeholder = b;
    }

    let mut t = file.train.clone();
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { t.$field = v; })*
        };
    }
    set!(gamma => gamma, lr => base_lr, warmup => warmup_steps, batch => batch_size, window => window_w,
        max_steps => max_steps, seed => seed, keywords_k => keywords_k, weight_decay => weight_decay,
        clip_norm => clip_norm, checkpoint_every => checkpoint_every, eval_every => eval_every,
        patience => patience);
    if a.seed.is_some() {
        model.seed = t.seed;
    }
    (model, t)
}

pub fn apply_generation_flags(file: &FileConfig, f: &GenerationFlags) -> GenerationConfig {
    let mut g = file.generation.clone();
    if let Some(v) = f.top_p {
        g.top_p = v;
    }
    if let Some(v) = f.top_k {
        g.top_k = v;
    }
    if let Some(v) = f.temperature {
        g.temperature = v;
    }
    if let Some(v) = f.rep_penalty {
        g.repetition_penalty = v;
    }
    if let Some(v) = f.max_new_tokens {
        g.max_new_tokens = v;
    }
    if let Some(v) = f.seed {
        g.seed = v;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_lists() {
        assert_eq!(parse_gamma("1,0.2,1,1").unwrap(), [1.0, 0.2, 1.0, 1.0]);
        assert!(parse_gamma("1,2").is_err());
        assert_eq!(parse_ratio("8:1:1").unwrap(), [8, 1, 1]);
        assert!(parse_ratio("0:0:0").is_err());
    }
}
