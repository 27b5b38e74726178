//! Model profiles and byte-level memory budgeting.
//!
//! A retained visual token costs its projected embedding plus the key and
//! value cache entries it occupies in every language-model layer:
//!
//! ```text
//! per_token_bytes = d * s_emb + 2 * L * (n_kv * d_head) * s_kv
//! ```
//!
//! A shared byte budget is turned into a per-model token cap by flooring the
//! budget over that coefficient, so models with wider embeddings or deeper KV
//! caches get proportionally fewer tokens.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BYTES_PER_GB: f64 = 1e9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("profile `{model_id}`: {field} must be at least {min}, got {value}")]
    FieldTooSmall {
        model_id: String,
        field: &'static str,
        min: u64,
        value: u64,
    },
    #[error(
        "profile `{model_id}`: params_billions must be > 1 so that ln(params) > 0, got {value}"
    )]
    ParamsTooSmall { model_id: String, value: f64 },
    #[error("profile model_id must not be empty")]
    EmptyModelId,
    #[error("per-token cost of `{model_id}` overflows 64 bits")]
    Overflow { model_id: String },
    #[error("duplicate model_id `{0}` in profile config")]
    Duplicate(String),
    #[error("no profile named `{0}`")]
    UnknownModel(String),
    #[error("invalid profile config: {0}")]
    Config(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BudgetError {
    #[error("budget must be positive and finite, got {0} GB")]
    NonPositive(f64),
    #[error("budget must be at least one byte")]
    Zero,
    #[error("cannot parse budget `{0}` (expected e.g. `0.5GB` or a raw byte count)")]
    Parse(String),
    #[error("effective memory needs mem_gb > 0, got {0}")]
    NonPositiveMemory(f64),
    #[error("effective memory needs params_billions > 1, got {0}")]
    ParamsTooSmall(f64),
}

fn default_elem_bytes() -> u32 {
    2
}

#[derive(Deserialize)]
struct RawProfile {
    model_id: String,
    embed_dim: u32,
    layers: u32,
    kv_heads: u32,
    head_dim: u32,
    #[serde(default = "default_elem_bytes")]
    emb_bytes: u32,
    #[serde(default = "default_elem_bytes")]
    kv_bytes: u32,
    params_billions: f64,
}

/// Budget-relevant dimensions of one model.
///
/// The KV channel width is always derived as `kv_heads * head_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProfile")]
pub struct ModelProfile {
    model_id: String,
    embed_dim: u32,
    layers: u32,
    kv_heads: u32,
    head_dim: u32,
    emb_bytes: u32,
    kv_bytes: u32,
    params_billions: f64,
}

impl TryFrom<RawProfile> for ModelProfile {
    type Error = ProfileError;

    fn try_from(r: RawProfile) -> Result<Self, Self::Error> {
        ModelProfile::new(
            r.model_id,
            r.embed_dim,
            r.layers,
            r.kv_heads,
            r.head_dim,
            r.emb_bytes,
            r.kv_bytes,
            r.params_billions,
        )
    }
}

impl ModelProfile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: impl Into<String>,
        embed_dim: u32,
        layers: u32,
        kv_heads: u32,
        head_dim: u32,
        emb_bytes: u32,
        kv_bytes: u32,
        params_billions: f64,
    ) -> Result<Self, ProfileError> {
        let model_id = model_id.into();
        if model_id.is_empty() {
            return Err(ProfileError::EmptyModelId);
        }
        for (field, value) in [
            ("embed_dim", embed_dim),
            ("kv_heads", kv_heads),
            ("head_dim", head_dim),
            ("emb_bytes", emb_bytes),
            ("kv_bytes", kv_bytes),
        ] {
            if value < 1 {
                return Err(ProfileError::FieldTooSmall {
                    model_id,
                    field,
                    min: 1,
                    value: value as u64,
                });
            }
        }
        if !(params_billions.is_finite() && params_billions > 1.0) {
            return Err(ProfileError::ParamsTooSmall {
                model_id,
                value: params_billions,
            });
        }
        let profile = ModelProfile {
            model_id,
            embed_dim,
            layers,
            kv_heads,
            head_dim,
            emb_bytes,
            kv_bytes,
            params_billions,
        };
        if profile.checked_per_token_bytes().is_none() {
            return Err(ProfileError::Overflow {
                model_id: profile.model_id,
            });
        }
        Ok(profile)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }
    pub fn embed_dim(&self) -> u32 {
        self.embed_dim
    }
    pub fn layers(&self) -> u32 {
        self.layers
    }
    pub fn kv_heads(&self) -> u32 {
        self.kv_heads
    }
    pub fn head_dim(&self) -> u32 {
        self.head_dim
    }
    pub fn emb_bytes(&self) -> u32 {
        self.emb_bytes
    }
    pub fn kv_bytes(&self) -> u32 {
        self.kv_bytes
    }
    pub fn params_billions(&self) -> f64 {
        self.params_billions
    }

    /// Per-layer KV channel width.
    pub fn kv_width(&self) -> u64 {
        self.kv_heads as u64 * self.head_dim as u64
    }

    fn checked_per_token_bytes(&self) -> Option<u64> {
        let emb = (self.embed_dim as u64).checked_mul(self.emb_bytes as u64)?;
        let kv = 2u64
            .checked_mul(self.layers as u64)?
            .checked_mul(self.kv_width())?
            .checked_mul(self.kv_bytes as u64)?;
        emb.checked_add(kv)
    }
}

/// Shared memory budget, stored in bytes. GB are decimal (10^9 bytes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ByteBudget {
    bytes: u64,
}

impl ByteBudget {
    pub fn from_gb(gb: f64) -> Result<Self, BudgetError> {
        if !gb.is_finite() || gb <= 0.0 {
            return Err(BudgetError::NonPositive(gb));
        }
        let bytes = (gb * BYTES_PER_GB).round();
        if bytes < 1.0 {
            return Err(BudgetError::Zero);
        }
        Ok(ByteBudget {
            bytes: bytes as u64,
        })
    }

    pub fn from_bytes(bytes: u64) -> Result<Self, BudgetError> {
        if bytes == 0 {
            return Err(BudgetError::Zero);
        }
        Ok(ByteBudget { bytes })
    }

    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    pub fn gb(&self) -> f64 {
        self.bytes as f64 / BYTES_PER_GB
    }
}

impl fmt::Display for ByteBudget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}GB", self.gb())
    }
}

/// Accepts `0.5GB`, `0.5 gb`, `500000000` or `500000000B`.
impl FromStr for ByteBudget {
    type Err = BudgetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let lower = t.to_ascii_lowercase();
        if let Some(num) = lower.strip_suffix("gb") {
            let gb: f64 = num
                .trim()
                .parse()
                .map_err(|_| BudgetError::Parse(s.to_string()))?;
            return ByteBudget::from_gb(gb);
        }
        let digits = lower.strip_suffix('b').unwrap_or(&lower).trim();
        let bytes: u64 = digits
            .parse()
            .map_err(|_| BudgetError::Parse(s.to_string()))?;
        ByteBudget::from_bytes(bytes)
    }
}

/// Bytes retained per visual token: embedding plus K and V across all layers.
pub fn per_token_bytes(profile: &ModelProfile) -> u64 {
    profile
        .checked_per_token_bytes()
        .expect("validated at construction")
}

/// Storage for `tokens` retained visual tokens. Saturates at `u64::MAX`.
pub fn memory_cost(tokens: u64, profile: &ModelProfile) -> u64 {
    tokens.saturating_mul(per_token_bytes(profile))
}

/// Largest token count whose memory cost fits in the budget.
pub fn token_cap(budget: ByteBudget, profile: &ModelProfile) -> u64 {
    budget.bytes() / per_token_bytes(profile)
}

/// `mem_gb * ln(params_billions)`, the memory term of the composite score.
pub fn effective_memory(mem_gb: f64, params_billions: f64) -> Result<f64, BudgetError> {
    if !(mem_gb.is_finite() && mem_gb > 0.0) {
        return Err(BudgetError::NonPositiveMemory(mem_gb));
    }
    if !(params_billions.is_finite() && params_billions > 1.0) {
        return Err(BudgetError::ParamsTooSmall(params_billions));
    }
    Ok(mem_gb * params_billions.ln())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    #[serde(default)]
    model: Vec<ModelProfile>,
}

/// Parses a profile config: a TOML document with one `[[model]]` table per
/// model.
///
/// ```toml
/// [[model]]
/// model_id = "qwen2-7b"
/// embed_dim = 3584
/// layers = 28
/// kv_heads = 4
/// head_dim = 128
/// emb_bytes = 2        # optional, default 2
/// kv_bytes = 2         # optional, default 2
/// params_billions = 7.0
/// ```
pub fn parse_profiles(text: &str) -> Result<Vec<ModelProfile>, ProfileError> {
    let file: ProfileFile =
        toml::from_str(text).map_err(|e| ProfileError::Config(e.to_string()))?;
    let mut seen = HashSet::new();
    for p in &file.model {
        if !seen.insert(p.model_id.clone()) {
            return Err(ProfileError::Duplicate(p.model_id.clone()));
        }
    }
    Ok(file.model)
}

pub fn load_profiles(path: &Path) -> Result<Vec<ModelProfile>, ProfileError> {
    let text = std::fs::read_to_string(path).map_err(|e| ProfileError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_profiles(&text)
}

/// Picks `model_id` from the list, or the only profile when `model_id` is
/// `None`.
pub fn select_profile(
    profiles: Vec<ModelProfile>,
    model_id: Option<&str>,
) -> Result<ModelProfile, ProfileError> {
    match model_id {
        Some(id) => profiles
            .into_iter()
            .find(|p| p.model_id == id)
            .ok_or_else(|| ProfileError::UnknownModel(id.to_string())),
        None => {
            let n = profiles.len();
            let mut it = profiles.into_iter();
            match (it.next(), n) {
                (Some(p), 1) => Ok(p),
                _ => Err(ProfileError::Config(format!(
                    "expected exactly one profile when no model is named, found {n}"
                ))),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn profile(d: u32, s_emb: u32, l: u32, n_kv: u32, d_head: u32, s_kv: u32) -> ModelProfile {
        ModelProfile::new("m", d, l, n_kv, d_head, s_emb, s_kv, 7.0).unwrap()
    }

    fn qwen2() -> ModelProfile {
        profile(3584, 2, 28, 4, 128, 2)
    }

    // Oracle: largest B with memory_cost(B) <= bytes, found by linear scan.
    fn linear_cap(bytes: u64, per_token: u64) -> u64 {
        let mut b = 0;
        while (b + 1) * per_token <= bytes {
            b += 1;
        }
        b
    }

    #[test]
    fn per_token_bytes_examples() {
        assert_eq!(per_token_bytes(&profile(1, 1, 0, 1, 1, 2)), 1);
        assert_eq!(per_token_bytes(&qwen2()), 3584 * 2 + 2 * 28 * 512 * 2);
        assert_eq!(per_token_bytes(&qwen2()), 64512);
        assert_eq!(per_token_bytes(&profile(4096, 2, 32, 8, 128, 2)), 139264);
    }

    #[test]
    fn memory_cost_examples() {
        assert_eq!(memory_cost(0, &qwen2()), 0);
        assert_eq!(memory_cost(7750, &qwen2()), 7750 * 64512);
        assert_eq!(memory_cost(7750, &qwen2()), 499_968_000);
        assert_eq!(memory_cost(1, &profile(4096, 2, 32, 8, 128, 2)), 139264);
    }

    #[test]
    fn token_cap_examples() {
        let half_gb = ByteBudget::from_gb(0.5).unwrap();
        assert_eq!(half_gb.bytes(), 500_000_000);
        assert_eq!(token_cap(half_gb, &qwen2()), 7750);
        assert_eq!(
            token_cap(ByteBudget::from_bytes(64512).unwrap(), &qwen2()),
            1
        );
        assert_eq!(
            token_cap(ByteBudget::from_bytes(64511).unwrap(), &qwen2()),
            0
        );
    }

    #[test]
    fn effective_memory_examples() {
        assert!((effective_memory(1.0, std::f64::consts::E).unwrap() - 1.0).abs() < 1e-15);
        // 0.5 * ln 7 and 0.35 * ln 7, evaluated to 20 digits offline
        assert!((effective_memory(0.5, 7.0).unwrap() - 0.972_955_074_527_656_6).abs() < 1e-12);
        assert!((effective_memory(0.35, 7.0).unwrap() - 0.681_068_552_169_359_6).abs() < 1e-12);
    }

    #[test]
    fn effective_memory_rejects_small_params() {
        assert_eq!(
            effective_memory(0.5, 1.0),
            Err(BudgetError::ParamsTooSmall(1.0))
        );
        assert_eq!(
            effective_memory(0.0, 7.0),
            Err(BudgetError::NonPositiveMemory(0.0))
        );
    }

    #[test]
    fn profile_validation() {
        assert!(matches!(
            ModelProfile::new("m", 0, 1, 1, 1, 2, 2, 7.0),
            Err(ProfileError::FieldTooSmall {
                field: "embed_dim",
                ..
            })
        ));
        assert!(matches!(
            ModelProfile::new("m", 1, 1, 1, 1, 2, 2, 1.0),
            Err(ProfileError::ParamsTooSmall { .. })
        ));
        assert!(matches!(
            ModelProfile::new("", 1, 1, 1, 1, 2, 2, 7.0),
            Err(ProfileError::EmptyModelId)
        ));
        assert!(matches!(
            ModelProfile::new(
                "m",
                u32::MAX,
                u32::MAX,
                u32::MAX,
                u32::MAX,
                u32::MAX,
                u32::MAX,
                7.0
            ),
            Err(ProfileError::Overflow { .. })
        ));
    }

    #[test]
    fn budget_parsing() {
        assert_eq!("0.5GB".parse::<ByteBudget>().unwrap().bytes(), 500_000_000);
        assert_eq!("0.5 gb".parse::<ByteBudget>().unwrap().bytes(), 500_000_000);
        assert_eq!("64512".parse::<ByteBudget>().unwrap().bytes(), 64512);
        assert_eq!("64512B".parse::<ByteBudget>().unwrap().bytes(), 64512);
        assert!("half".parse::<ByteBudget>().is_err());
        assert!("0GB".parse::<ByteBudget>().is_err());
        assert!("-1GB".parse::<ByteBudget>().is_err());
    }

    #[test]
    fn profile_config_round_trip() {
        let text = r#"
            [[model]]
            model_id = "qwen2-7b"
            embed_dim = 3584
            layers = 28
            kv_heads = 4
            head_dim = 128
            params_billions = 7.0

            [[model]]
            model_id = "llama-8b"
            embed_dim = 4096
            layers = 32
            kv_heads = 8
            head_dim = 128
            emb_bytes = 2
            kv_bytes = 2
            params_billions = 8.0
        "#;
        let ps = parse_profiles(text).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].emb_bytes(), 2);
        assert_eq!(per_token_bytes(&ps[0]), 64512);
        assert_eq!(per_token_bytes(&ps[1]), 139264);
        let p = select_profile(ps, Some("llama-8b")).unwrap();
        assert_eq!(p.model_id(), "llama-8b");
    }

    #[test]
    fn profile_config_rejects_invalid_records() {
        let dup = "[[model]]\nmodel_id='a'\nembed_dim=1\nlayers=0\nkv_heads=1\nhead_dim=1\nparams_billions=2.0\n"
            .repeat(2);
        assert_eq!(
            parse_profiles(&dup),
            Err(ProfileError::Duplicate("a".into()))
        );
        let bad = "[[model]]\nmodel_id='a'\nembed_dim=1\nlayers=0\nkv_heads=1\nhead_dim=1\nparams_billions=0.5\n";
        assert!(matches!(parse_profiles(bad), Err(ProfileError::Config(_))));
    }

    prop_compose! {
        fn arb_profile()(d in 1u32..64, l in 0u32..8, n in 1u32..4, h in 1u32..16,
                         se in 1u32..4, sk in 1u32..4) -> ModelProfile {
            ModelProfile::new("p", d, l, n, h, se, sk, 7.0).unwrap()
        }
    }

    proptest! {
        #[test]
        fn cap_is_floor(p in arb_profile(), bytes in 1u64..1_000_000) {
            let budget = ByteBudget::from_bytes(bytes).unwrap();
            let b = token_cap(budget, &p);
            prop_assert!(memory_cost(b, &p) <= bytes);
            prop_assert!(memory_cost(b + 1, &p) > bytes);
            prop_assert_eq!(b, linear_cap(bytes, per_token_bytes(&p)));
        }

        #[test]
        fn cap_monotone_in_budget(p in arb_profile(), a in 1u64..10_000_000, extra in 0u64..10_000_000) {
            let lo = token_cap(ByteBudget::from_bytes(a).unwrap(), &p);
            let hi = token_cap(ByteBudget::from_bytes(a + extra).unwrap(), &p);
            prop_assert!(lo <= hi);
        }

        #[test]
        fn cap_antitone_in_cost(d in 1u32..64, extra in 0u32..64, l in 0u32..8, bytes in 1u64..10_000_000) {
            let small = ModelProfile::new("s", d, l, 1, 8, 2, 2, 7.0).unwrap();
            let big = ModelProfile::new("b", d + extra, l, 1, 8, 2, 2, 7.0).unwrap();
            let budget = ByteBudget::from_bytes(bytes).unwrap();
            prop_assert!(token_cap(budget, &big) <= token_cap(budget, &small));
        }

        #[test]
        fn effective_memory_strictly_increasing(m in 0.01f64..10.0, dm in 0.001f64..1.0,
                                                p in 1.01f64..100.0, dp in 0.01f64..10.0) {
            let base = effective_memory(m, p).unwrap();
            prop_assert!(effective_memory(m + dm, p).unwrap() > base);
            prop_assert!(effective_memory(m, p + dp).unwrap() > base);
        }
    }
}
