//! Training configuration, its `key = value` file format and content hash.

use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{KcanError, Result};
use crate::graph::hex16;
use crate::params::{AdamConfig, ModelDims};
use crate::transh::ScoreNorm;

/// Which of the two propagation pathways are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    NoLc,
    NoGk,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoGk, Ablation::NoLc, Ablation::NoBoth];

    pub fn from_flags(use_gk: bool, use_lc: bool) -> Self {
        match (use_gk, use_lc) {
            (true, true) => Ablation::Full,
            (true, false) => Ablation::NoLc,
            (false, true) => Ablation::NoGk,
            (false, false) => Ablation::NoBoth,
        }
    }

    /// Global knowledge-aware propagation enabled.
    pub fn use_gk(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoLc)
    }

    /// Local conditional refinement enabled.
    pub fn use_lc(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoGk)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoLc => "no_lc",
            Ablation::NoGk => "no_gk",
            Ablation::NoBoth => "no_both",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = KcanError;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| KcanError::Config(format!("unknown ablation '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// `F0`.
    pub embed_dim: usize,
    /// `[F1, ..., F_{K+1}]`.
    pub tower: Vec<usize>,
    pub out_dim: usize,
    /// `K`.
    pub hops: usize,
    /// `M`.
    pub fanout: usize,
    pub lr: f64,
    pub epochs: usize,
    pub lambda: f64,
    pub dropout: f64,
    pub kg_batch: usize,
    pub target_batch: usize,
    pub norm: ScoreNorm,
    pub seed: u64,
    pub ablation: Ablation,
    /// Keep the direct user-item edge out of a target's own subgraph.
    pub exclude_target_edge: bool,
    pub eval_negatives: usize,
    pub top_k: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_dim: 16,
            tower: vec![16, 8, 8],
            out_dim: 8,
            hops: 2,
            fanout: 20,
            lr: 0.025,
            epochs: 200,
            lambda: 1e-3,
            dropout: 0.1,
            kg_batch: 1024,
            target_batch: 256,
            norm: ScoreNorm::L1Sq,
            seed: 0,
            ablation: Ablation::Full,
            exclude_target_edge: true,
            eval_negatives: 100,
            top_k: 10,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
    value.parse().map_err(|_| format!("invalid value '{value}' for {key}"))
}

fn parse_bool(key: &str, value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("invalid value '{value}' for {key}")),
    }
}

impl TrainConfig {
    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        match key {
            "embed_dim" => self.embed_dim = parse_value(key, value)?,
            "tower" => {
                self.tower = value
                    .split(',')
                    .map(|p| parse_value(key, p.trim()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "out_dim" => self.out_dim = parse_value(key, value)?,
            "hops" => self.hops = parse_value(key, value)?,
            "fanout" => self.fanout = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lambda" => self.lambda = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "kg_batch" => self.kg_batch = parse_value(key, value)?,
            "target_batch" => self.target_batch = parse_value(key, value)?,
            "norm" => self.norm = ScoreNorm::parse(value).ok_or_else(|| format!("unknown norm '{value}'"))?,
            "seed" => self.seed = parse_value(key, value)?,
            "ablation" => self.ablation = value.parse().map_err(|e: KcanError| e.to_string())?,
            "exclude_target_edge" => self.exclude_target_edge = parse_bool(key, value)?,
            "eval_negatives" => self.eval_negatives = parse_value(key, value)?,
            "top_k" => self.top_k = parse_value(key, value)?,
            _ => return Err(format!("unknown key '{key}'")),
        }
        Ok(())
    }

    /// Defaults overridden by `key = value` lines; `#` starts a comment.
    pub fn parse(reader: impl BufRead, source_name: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| KcanError::io(source_name, e))?;
            let content = line.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| KcanError::Parse {
                source_name: source_name.to_string(),
                line: n + 1,
                msg,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err("expected 'key = value'".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| KcanError::io(path, e))?;
        Self::parse(std::io::BufReader::new(file), &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("out_dim", self.out_dim),
            ("hops", self.hops),
            ("fanout", self.fanout),
            ("kg_batch", self.kg_batch),
            ("target_batch", self.target_batch),
            ("eval_negatives", self.eval_negatives),
            ("top_k", self.top_k),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(KcanError::Config(format!("{k} must be positive")));
        }
        if self.hops > 255 {
            return Err(KcanError::Config("hops must be at most 255".into()));
        }
        if self.tower.len() != self.hops + 1 {
            return Err(KcanError::Config(format!(
                "tower has {} entries but hops = {} needs {}",
                self.tower.len(),
                self.hops,
                self.hops + 1
            )));
        }
        if self.tower.contains(&0) {
            return Err(KcanError::Config("tower widths must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KcanError::Config("lr must be positive".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(KcanError::Config("lambda must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(KcanError::Config("dropout must lie in [0, 1)".into()));
        }
        if !self.ablation.use_gk() && self.embed_dim != self.tower[0] {
            return Err(KcanError::Config(format!(
                "ablation {} feeds knowledge embeddings directly, so embed_dim must equal tower[0]",
                self.ablation
            )));
        }
        Ok(())
    }

    pub fn dims(&self, entity_count: usize, relation_count: usize) -> ModelDims {
        ModelDims {
            entity_count,
            relation_count,
            embed_dim: self.embed_dim,
            tower: self.tower.clone(),
            out_dim: self.out_dim,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_lr(self.lr)
    }

    /// All settings except the seed, one `key = value` per line in a fixed order.
    pub fn canonical(&self) -> String {
        let tower: Vec<String> = self.tower.iter().map(|d| d.to_string()).collect();
        let lines = [
            format!("embed_dim = {}", self.embed_dim),
            format!("tower = {}", tower.join(",")),
            format!("out_dim = {}", self.out_dim),
            format!("hops = {}", self.hops),
            format!("fanout = {}", self.fanout),
            format!("lr = {:?}", self.lr),
            format!("epochs = {}", self.epochs),
            format!("lambda = {:?}", self.lambda),
            format!("dropout = {:?}", self.dropout),
            format!("kg_batch = {}", self.kg_batch),
            format!("target_batch = {}", self.target_batch),
            format!("norm = {}", self.norm.as_str()),
            format!("ablation = {}", self.ablation),
            format!("exclude_target_edge = {}", self.exclude_target_edge),
            format!("eval_negatives = {}", self.eval_negatives),
            format!("top_k = {}", self.top_k),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    /// 16 hex digits of the SHA-256 of [`TrainConfig::canonical`].
    pub fn hash(&self) -> String {
        hex16(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        TrainConfig {
            ablation,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.tower, vec![16, 8, 8]);
        assert_eq!(c.hash().len(), 16);
    }

    #[test]
    fn parse_overrides_and_round_trips() {
        let text = "# comment\nfanout = 5\nlambda = 0.01  # trailing\ntower = 16, 4\nhops = 1\nablation = no_lc\nnorm = l2_sq\n\n";
        let c = TrainConfig::parse(text.as_bytes(), "cfg").unwrap();
        assert_eq!(c.fanout, 5);
        assert_eq!(c.lambda, 0.01);
        assert_eq!(c.tower, vec![16, 4]);
        assert_eq!(c.ablation, Ablation::NoLc);
        assert_eq!(c.norm, ScoreNorm::L2Sq);
        let again = TrainConfig::parse(c.canonical().as_bytes(), "canon").unwrap();
        assert_eq!(again, TrainConfig { seed: 0, ..c.clone() });
        assert_eq!(again.hash(), c.hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let e = TrainConfig::parse("fanout = 3\nbogus = 1\n".as_bytes(), "cfg").unwrap_err();
        assert!(matches!(e, KcanError::Parse { line: 2, .. }), "{e}");
        let e = TrainConfig::parse("fanout 3\n".as_bytes(), "cfg").unwrap_err();
        assert!(matches!(e, KcanError::Parse { line: 1, .. }));
        let e = TrainConfig::parse("fanout = x\n".as_bytes(), "cfg").unwrap_err();
        assert!(matches!(e, KcanError::Parse { line: 1, .. }));
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.hops = 3));
        assert!(bad(|c| c.fanout = 0));
        assert!(bad(|c| c.dropout = 1.0));
        assert!(bad(|c| c.lr = 0.0));
        assert!(bad(|c| c.lambda = -1.0));
        assert!(bad(|c| {
            c.ablation = Ablation::NoGk;
            c.embed_dim = 8;
        }));
    }

    #[test]
    fn ablation_flags() {
        for a in Ablation::ALL {
            assert_eq!(Ablation::from_flags(a.use_gk(), a.use_lc()), a);
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
        assert!(!Ablation::NoBoth.use_gk() && !Ablation::NoBoth.use_lc());
    }

    #[test]
    fn variants_differ_only_in_ablation_line() {
        let base = TrainConfig::default();
        for a in Ablation::ALL {
            let v = base.with_ablation(a);
            let (lhs, rhs) = (base.canonical(), v.canonical());
            let diff: Vec<(&str, &str)> = lhs.lines().zip(rhs.lines()).filter(|(x, y)| x != y).collect::<Vec<_>>();
            if a == Ablation::Full {
                assert!(diff.is_empty());
                assert_eq!(v.hash(), base.hash());
            } else {
                assert_eq!(diff.len(), 1);
                assert!(diff[0].0.starts_with("ablation"));
                assert_ne!(v.hash(), base.hash());
            }
        }
    }

    #[test]
    fn seed_is_not_hashed() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 9, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
    }
}
