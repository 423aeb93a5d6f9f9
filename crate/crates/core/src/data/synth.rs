//! Calibrated synthetic trader data with a planted skill signal.
//!
//! Every account gets a latent profile (normal or risky) and a latent skill
//! `h ~ N(0, 1)`. Its trade P&L drifts with `h` (plus a bonus for the risky
//! profile), so forward returns and `next_total_pl` increase with skill.
//! Each continuous feature is drawn as `F⁻¹(u)` where `F` is the
//! profile's distribution for that feature, moment-matched to the reference
//! statistics below, and `u = Φ(ρ·h + √(1-ρ²)·ε)`. Because `u` is uniform
//! whatever the profile, per-profile marginals match the reference means and
//! standard deviations exactly, while the features with `ρ > 0` carry the
//! skill signal.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::data::labels::assign_labels;
use crate::data::ledger::{compute_return, Trade, TradeLedger};
use crate::data::record::{CategoricalFeature, Dataset, FeatureSchema, TraderRecord};
use crate::error::{Error, Result};
use crate::par::Exec;

/// History window, in trades, summarised by the features.
pub const HISTORY: usize = 20;
/// Forward window for returns and `next_total_pl`.
pub const FORWARD: usize = 100;
/// Forward window for the hedging P&L.
pub const HEDGE_WINDOW: usize = 20;

/// Mean, standard deviation and skew per profile (`[normal, risky]`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub name: &'static str,
    pub mean: [f64; 2],
    pub std: [f64; 2],
    pub skew: [f64; 2],
}

const fn stats(name: &'static str, m: [f64; 2], s: [f64; 2], k: [f64; 2]) -> FeatureStats {
    FeatureStats {
        name,
        mean: m,
        std: s,
        skew: k,
    }
}

/// Reference statistics of the 14 continuous features, scaled to `[0, 1]`.
pub const REFERENCE_STATS: [FeatureStats; 14] = [
    stats("AVGPTS3_20", [0.430, 0.588], [0.211, 0.244], [0.331, -0.211]),
    stats("AvgOpen20", [0.535, 0.638], [0.220, 0.345], [-0.337, -0.627]),
    stats("AvgShortSales20", [0.485, 0.419], [0.270, 0.330], [-0.025, 0.258]),
    stats("DurationRate20", [0.320, 0.355], [0.120, 0.132], [-0.151, -0.464]),
    stats("DurationRatio20", [0.127, 0.166], [0.067, 0.124], [3.492, 3.821]),
    stats("PassAvgReturn", [0.502, 0.540], [0.053, 0.121], [-0.305, 0.736]),
    stats("ProfitRate20", [0.497, 0.623], [0.243, 0.297], [0.343, -0.325]),
    stats("ProfitxDur20", [0.327, 0.422], [0.173, 0.223], [0.988, 0.270]),
    stats("SharpeRatio20", [0.443, 0.489], [0.082, 0.127], [1.096, 0.743]),
    stats("WinTradeRate20", [0.623, 0.685], [0.204, 0.238], [-0.204, -0.557]),
    stats("PerFTSE20", [0.249, 0.157], [0.356, 0.279], [1.163, 1.906]),
    stats("TradFQ20", [0.363, 0.314], [0.292, 0.285], [1.153, 1.394]),
    stats("OrderCloseRate20", [0.182, 0.189], [0.263, 0.286], [1.464, 1.476]),
    stats("NumTrades", [0.305, 0.270], [0.326, 0.290], [1.094, 1.290]),
];

/// Features whose copula is driven by the latent skill.
pub const LINKED_FEATURES: [&str; 3] = ["ProfitRate20", "SharpeRatio20", "WinTradeRate20"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    Normal = 0,
    Risky = 1,
}

/// A `[0, 1]`-supported distribution matched to a mean and standard
/// deviation: beta when feasible, otherwise a normal truncated to `[0, 1]`.
#[derive(Debug, Clone)]
pub enum FeatureDist {
    Beta { a: f64, b: f64 },
    TruncatedNormal { mean: f64, std: f64 },
}

impl FeatureDist {
    /// Moment-matched beta; `None` when `var >= mean·(1-mean)`.
    pub fn beta_from_moments(mean: f64, std: f64) -> Option<Self> {
        let var = std * std;
        if !(mean > 0.0 && mean < 1.0) || !(var > 0.0) || var >= mean * (1.0 - mean) {
            return None;
        }
        let common = mean * (1.0 - mean) / var - 1.0;
        Some(FeatureDist::Beta {
            a: mean * common,
            b: (1.0 - mean) * common,
        })
    }

    pub fn matched(mean: f64, std: f64, warnings: &mut Vec<String>, name: &str) -> Self {
        Self::beta_from_moments(mean, std).unwrap_or_else(|| {
            warnings.push(format!(
                "{name}: mean {mean} / std {std} infeasible for a beta; using truncated normal"
            ));
            FeatureDist::TruncatedNormal { mean, std }
        })
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match *self {
            FeatureDist::Beta { a, b } => Beta::new(a, b).expect("valid shape").inverse_cdf(u),
            FeatureDist::TruncatedNormal { mean, std } => {
                let n = Normal::new(mean, std).expect("valid normal");
                let (lo, hi) = (n.cdf(0.0), n.cdf(1.0));
                n.inverse_cdf(lo + u * (hi - lo)).clamp(0.0, 1.0)
            }
        }
    }
}

/// Tabulated quantile function, linearly interpolated.
#[derive(Debug, Clone)]
struct QuantileTable(Vec<f64>);

const TABLE_POINTS: usize = 4096;

impl QuantileTable {
    fn new(dist: &FeatureDist) -> Self {
        QuantileTable(
            (0..=TABLE_POINTS)
                .map(|i| dist.quantile(i as f64 / TABLE_POINTS as f64))
                .collect(),
        )
    }

    fn eval(&self, u: f64) -> f64 {
        let x = u.clamp(0.0, 1.0) * TABLE_POINTS as f64;
        let i = (x.floor() as usize).min(TABLE_POINTS - 1);
        let t = x - i as f64;
        self.0[i] * (1.0 - t) + self.0[i + 1] * t
    }
}

/// Per-profile feature distributions.
#[derive(Debug, Clone)]
pub struct Calibration {
    pub names: Vec<String>,
    dists: [Vec<FeatureDist>; 2],
    tables: [Vec<QuantileTable>; 2],
    pub warnings: Vec<String>,
}

impl Calibration {
    pub fn from_stats(stats: &[FeatureStats]) -> Self {
        let mut warnings = Vec::new();
        let mut dists: [Vec<FeatureDist>; 2] = Default::default();
        for (p, d) in dists.iter_mut().enumerate() {
            *d = stats
                .iter()
                .map(|s| FeatureDist::matched(s.mean[p], s.std[p], &mut warnings, s.name))
                .collect();
        }
        let tables = [
            dists[0].iter().map(QuantileTable::new).collect(),
            dists[1].iter().map(QuantileTable::new).collect(),
        ];
        Calibration {
            names: stats.iter().map(|s| s.name.to_string()).collect(),
            dists,
            tables,
            warnings,
        }
    }

    pub fn reference() -> Self {
        Self::from_stats(&REFERENCE_STATS)
    }

    pub fn dist(&self, profile: Profile, feature: usize) -> &FeatureDist {
        &self.dists[profile as usize][feature]
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Value of `feature` for `profile` at quantile `u`.
    pub fn value(&self, profile: Profile, feature: usize, u: f64) -> f64 {
        self.tables[profile as usize][feature].eval(u)
    }

    /// Independent draws of one feature for one profile.
    pub fn sample<R: Rng>(&self, profile: Profile, feature: usize, n: usize, rng: &mut R) -> Vec<f64> {
        (0..n).map(|_| self.value(profile, feature, rng.gen::<f64>())).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_traders: usize,
    pub trades_per_trader: usize,
    pub seed: u64,
    /// Share of accounts with the risky feature profile.
    pub risky_profile_rate: f64,
    /// Copula correlation between skill and each linked feature.
    pub link_strength: f64,
    /// Mean per-trade return per unit of skill.
    pub edge_per_skill: f64,
    /// Extra skill units credited to risky-profile accounts.
    pub risky_skill_bonus: f64,
    /// Per-trade return noise (standard deviation).
    pub trade_noise: f64,
    /// Top-α% of forward returns labelled risky.
    pub alpha: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_traders: 1000,
            trades_per_trader: 200,
            seed: 0,
            risky_profile_rate: 0.02,
            link_strength: 0.9,
            edge_per_skill: 0.01,
            risky_skill_bonus: 1.0,
            trade_noise: 0.05,
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub dataset: Dataset,
    pub ledger: TradeLedger,
    /// Latent skill behind each record (index-aligned with the records).
    pub skills: Vec<f64>,
    pub profiles: Vec<Profile>,
    pub warnings: Vec<String>,
}

pub fn synthetic_schema(cal: &Calibration) -> FeatureSchema {
    FeatureSchema::new(
        cal.names.clone(),
        vec![
            CategoricalFeature {
                name: "AgeGroup".into(),
                vocab: 5,
            },
            CategoricalFeature {
                name: "MarketCluster".into(),
                vocab: 10,
            },
            CategoricalFeature {
                name: "Segment".into(),
                vocab: 3,
            },
        ],
    )
}

fn stream_seed(seed: u64, account: u64) -> u64 {
    let mut z = seed.wrapping_add(account.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Return category of the history window: 0 above 5%, 1 in `[0, 5%]`,
/// 2 negative.
fn segment(history: &[Trade]) -> u32 {
    let pnl: f64 = history.iter().map(|t| t.pnl).sum();
    let margin: f64 = history.iter().map(|t| t.margin).sum();
    let r = pnl / margin;
    if r > 0.05 {
        0
    } else if r >= 0.0 {
        1
    } else {
        2
    }
}

struct AccountDraw {
    trades: Vec<Trade>,
    records: Vec<TraderRecord>,
    skill: f64,
    profile: Profile,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticData> {
    generate_synthetic_with(cfg, &Calibration::reference(), Exec::default())
}

pub fn generate_synthetic_with(cfg: &SynthConfig, cal: &Calibration, exec: Exec) -> Result<SyntheticData> {
    if cfg.n_traders < 100 {
        return Err(Error::Config(format!("need at least 100 traders, got {}", cfg.n_traders)));
    }
    let min_trades = HISTORY + FORWARD + HEDGE_WINDOW;
    if cfg.trades_per_trader < min_trades {
        return Err(Error::Config(format!(
            "need at least {min_trades} trades per trader, got {}",
            cfg.trades_per_trader
        )));
    }
    if !(0.0..=1.0).contains(&cfg.link_strength) || !(0.0..=1.0).contains(&cfg.risky_profile_rate) {
        return Err(Error::Config("link strength and profile rate must lie in [0, 1]".into()));
    }
    let schema = synthetic_schema(cal);
    let linked: Vec<bool> = cal.names.iter().map(|n| LINKED_FEATURES.contains(&n.as_str())).collect();
    let rho = cfg.link_strength;
    let rho_c = (1.0 - rho * rho).sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");

    let draws: Vec<Result<AccountDraw>> = exec.map_range(cfg.n_traders, |acct| {
        let account_id = acct as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, account_id));
        let profile = if rng.gen::<f64>() < cfg.risky_profile_rate {
            Profile::Risky
        } else {
            Profile::Normal
        };
        let skill: f64 = rng.sample(StandardNormal);
        let bonus = if profile == Profile::Risky { cfg.risky_skill_bonus } else { 0.0 };
        let drift = cfg.edge_per_skill * (skill + bonus);
        let trades: Vec<Trade> = (0..cfg.trades_per_trader)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                let margin = 100.0 * (0.3 * z).exp();
                let e: f64 = rng.sample(StandardNormal);
                Trade {
                    pnl: margin * (drift + cfg.trade_noise * e),
                    margin,
                }
            })
            .collect();
        let mut ledger = TradeLedger::new();
        ledger.insert_account(account_id, trades.clone())?;
        let age = rng.gen_range(0..5u32);
        let mut records = Vec::new();
        let mut j = HISTORY;
        while j + FORWARD <= cfg.trades_per_trader {
            let continuous: Vec<f64> = (0..cal.names.len())
                .map(|f| {
                    let e: f64 = rng.sample(StandardNormal);
                    let w = if linked[f] { rho * skill + rho_c * e } else { e };
                    cal.value(profile, f, std_normal.cdf(w))
                })
                .collect();
            let market = rng.gen_range(0..10u32);
            let seg = segment(&trades[j - HISTORY..j]);
            records.push(TraderRecord {
                account_id,
                period: (j / HISTORY) as u32,
                market,
                continuous,
                categorical: vec![age, market, seg],
                next_total_pl: ledger.forward_pnl(account_id, j, FORWARD)?,
                next_profit_20: ledger.forward_pnl(account_id, j, HEDGE_WINDOW)?,
                future_return: compute_return(&ledger, account_id, j, FORWARD)?,
                label: 0,
            });
            j += HISTORY;
        }
        Ok(AccountDraw {
            trades,
            records,
            skill,
            profile,
        })
    });

    let mut ledger = TradeLedger::new();
    let mut records = Vec::new();
    let mut skills = Vec::new();
    let mut profiles = Vec::new();
    for (acct, d) in draws.into_iter().enumerate() {
        let d = d?;
        ledger.insert_account(acct as u64, d.trades)?;
        for r in d.records {
            skills.push(d.skill);
            profiles.push(d.profile);
            records.push(r);
        }
    }
    let returns: Vec<_> = records.iter().map(|r| (r.key(), r.future_return)).collect();
    let labels = assign_labels(&returns, cfg.alpha)?;
    for (r, l) in records.iter_mut().zip(labels) {
        r.label = l;
    }
    Ok(SyntheticData {
        dataset: Dataset { schema, records },
        ledger,
        skills,
        profiles,
        warnings: cal.warnings.clone(),
    })
}
