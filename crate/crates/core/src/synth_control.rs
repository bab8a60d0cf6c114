//! Energy-trajectory control for expressive synthesis.
//!
//! Per-turn energies from the dialogue history give an endpoint trend that
//! picks an empathetic strategy with fixed prosody parameters (α, β). Turn
//! style vectors are fused with inverse-energy weights so quieter turns
//! dominate. The result is a versioned, backend-agnostic control record.

use serde::{Deserialize, Serialize};

use crate::corpus::{turn_features, DialogueHistory, Role, Turn};
use crate::error::{Error, Result};
use crate::features::{mean_energy, FeatureMatrix, DEFAULT_HOP, DEFAULT_N_MELS};

pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_TREND_TOL: f64 = 1e-6;
pub const CONTROL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrajectory {
    energies: Vec<f64>,
}

impl EnergyTrajectory {
    pub fn new(energies: Vec<f64>) -> Result<Self> {
        if energies.is_empty() {
            return Err(Error::InvalidArgument(
                "energy trajectory needs ≥ 1 turn".into(),
            ));
        }
        if let Some(e) = energies.iter().find(|e| !e.is_finite() || **e < 0.0) {
            return Err(Error::InvalidArgument(format!("invalid turn energy {e}")));
        }
        Ok(Self { energies })
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn len(&self) -> usize {
        self.energies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.energies.is_empty()
    }
}

/// Mean energy of one turn's linear mel features.
pub fn turn_energy(turn: &Turn, n_mels: usize, hop: usize) -> Result<f64> {
    mean_energy(&turn_features(turn, n_mels, hop)?)
}

/// One energy per turn, chronological.
pub fn energy_trajectory_of(turns: &[Turn], n_mels: usize, hop: usize) -> Result<EnergyTrajectory> {
    EnergyTrajectory::new(
        turns
            .iter()
            .map(|t| turn_energy(t, n_mels, hop))
            .collect::<Result<_>>()?,
    )
}

pub fn energy_trajectory(history: &DialogueHistory) -> Result<EnergyTrajectory> {
    energy_trajectory_of(&history.turns, DEFAULT_N_MELS, DEFAULT_HOP)
}

/// `(e_n − e_1)/(n − 1)`, and 0 for a single turn.
pub fn energy_trend(traj: &EnergyTrajectory) -> f64 {
    let e = traj.energies();
    let n = e.len();
    if n < 2 {
        return 0.0;
    }
    (e[n - 1] - e[0]) / (n - 1) as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Comfort,
    Encourage,
    Neutral,
}

impl Strategy {
    /// Speaking-rate and pitch/energy scale `(α, β)`.
    pub fn prosody(self) -> (f64, f64) {
        match self {
            Self::Comfort => (0.85, 1.2),
            Self::Encourage => (1.0, 1.1),
            Self::Neutral => (0.95, 1.0),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Comfort => "comfort",
            Self::Encourage => "encourage",
            Self::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyDecision {
    pub strategy: Strategy,
    pub delta_e: f64,
    pub alpha: f64,
    pub beta: f64,
}

pub fn select_strategy(delta_e: f64, tol: f64) -> Result<StrategyDecision> {
    if !delta_e.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite energy trend {delta_e}"
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "trend tolerance {tol} must be ≥ 0"
        )));
    }
    let strategy = if delta_e < -tol {
        Strategy::Comfort
    } else if delta_e > tol {
        Strategy::Encourage
    } else {
        Strategy::Neutral
    };
    let (alpha, beta) = strategy.prosody();
    Ok(StrategyDecision {
        strategy,
        delta_e,
        alpha,
        beta,
    })
}

/// `w_k = (1/(e_k+ε)) / Σ_j 1/(e_j+ε)`.
pub fn fusion_weights(energies: &[f64], epsilon: f64) -> Result<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} must be > 0"
        )));
    }
    let traj = EnergyTrajectory::new(energies.to_vec())?;
    let inv: Vec<f64> = traj
        .energies()
        .iter()
        .map(|e| 1.0 / (e + epsilon))
        .collect();
    let z: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|v| v / z).collect())
}

/// `Σ w_k · s_k`.
pub fn fuse_styles(styles: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if styles.is_empty() {
        return Err(Error::InvalidArgument("no style vectors".into()));
    }
    if styles.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} styles vs {} weights",
            styles.len(),
            weights.len()
        )));
    }
    let dim = styles[0].len();
    if let Some(s) = styles.iter().find(|s| s.len() != dim) {
        return Err(Error::Shape(format!("style dim {} vs {dim}", s.len())));
    }
    let mut out = vec![0.0; dim];
    for (s, &w) in styles.iter().zip(weights) {
        for (o, &v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// Stand-in style vector: the time-averaged normalized log-mel spectrum.
pub fn default_style(features: &FeatureMatrix) -> Vec<f64> {
    let log = features.to_log();
    let n = log.n_frames() as f64;
    log.values()
        .sum_axis(ndarray::Axis(0))
        .iter()
        .map(|v| v / n)
        .collect()
}

/// Which history turns take part in style fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoleFilter {
    #[default]
    All,
    Speaker,
    Listener,
}

impl RoleFilter {
    pub fn admits(self, role: Role) -> bool {
        match self {
            Self::All => true,
            Self::Speaker => role == Role::Speaker,
            Self::Listener => role == Role::Listener,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleFusion {
    pub turns: Vec<usize>,
    pub energies: Vec<f64>,
    pub weights: Vec<f64>,
    pub epsilon: f64,
    pub fused: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub epsilon: f64,
    pub trend_tol: f64,
    pub style_roles: RoleFilter,
    pub n_mels: usize,
    pub hop: usize,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            trend_tol: DEFAULT_TREND_TOL,
            style_roles: RoleFilter::All,
            n_mels: DEFAULT_N_MELS,
            hop: DEFAULT_HOP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnControl {
    pub index: usize,
    pub energy: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub version: u32,
    pub text: String,
    pub strategy: Strategy,
    pub alpha: f64,
    pub beta: f64,
    pub fused_style: Vec<f64>,
    pub turns: Vec<TurnControl>,
}

const RECORD_FIELDS: [&str; 7] = [
    "version",
    "text",
    "strategy",
    "alpha",
    "beta",
    "fused_style",
    "turns",
];

pub fn emit_control_record(
    text: &str,
    decision: &StrategyDecision,
    fusion: &StyleFusion,
) -> ControlRecord {
    ControlRecord {
        version: CONTROL_SCHEMA_VERSION,
        text: text.to_string(),
        strategy: decision.strategy,
        alpha: decision.alpha,
        beta: decision.beta,
        fused_style: fusion.fused.clone(),
        turns: fusion
            .turns
            .iter()
            .zip(&fusion.energies)
            .zip(&fusion.weights)
            .map(|((&index, &energy), &weight)| TurnControl {
                index,
                energy,
                weight,
            })
            .collect(),
    }
}

impl ControlRecord {
    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidArgument("control record must be a JSON object".into()))?;
        let missing: Vec<String> = RECORD_FIELDS
            .iter()
            .filter(|f| !obj.contains_key(**f))
            .map(|f| f.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingFields(missing));
        }
        let found = obj["version"].as_u64().ok_or_else(|| {
            Error::InvalidArgument("control record version must be an integer".into())
        })?;
        if found != CONTROL_SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                expected: CONTROL_SCHEMA_VERSION,
                found: found as u32,
            });
        }
        Ok(serde_json::from_value(value)?)
    }
}

/// Trajectory, strategy and style fusion for a history, attached to a
/// response text.
pub fn plan_control(
    history: &DialogueHistory,
    text: &str,
    cfg: &ControlConfig,
) -> Result<(ControlRecord, EnergyTrajectory, StrategyDecision)> {
    let feats = history
        .turns
        .iter()
        .map(|t| turn_features(t, cfg.n_mels, cfg.hop))
        .collect::<Result<Vec<_>>>()?;
    let energies = feats.iter().map(mean_energy).collect::<Result<Vec<_>>>()?;
    let traj = EnergyTrajectory::new(energies)?;
    let decision = select_strategy(energy_trend(&traj), cfg.trend_tol)?;

    let chosen: Vec<usize> = (0..history.turns.len())
        .filter(|&i| cfg.style_roles.admits(history.turns[i].role))
        .collect();
    if chosen.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no history turns match style filter {:?}",
            cfg.style_roles
        )));
    }
    let energies: Vec<f64> = chosen.iter().map(|&i| traj.energies()[i]).collect();
    let weights = fusion_weights(&energies, cfg.epsilon)?;
    let styles: Vec<Vec<f64>> = chosen.iter().map(|&i| default_style(&feats[i])).collect();
    let fusion = StyleFusion {
        turns: chosen.iter().map(|&i| history.turns[i].index).collect(),
        fused: fuse_styles(&styles, &weights)?,
        energies,
        weights,
        epsilon: cfg.epsilon,
    };
    Ok((
        emit_control_record(text, &decision, &fusion),
        traj,
        decision,
    ))
}

#[cfg(test)]
mod tests {
    use super::Strategy;
    use super::*;
    use crate::features::{FeatureScale, Waveform};
    use crate::tensor::Mat;
    use proptest::prelude::*;

    fn traj(e: &[f64]) -> EnergyTrajectory {
        EnergyTrajectory::new(e.to_vec()).unwrap()
    }

    #[test]
    fn trend_examples() {
        assert_eq!(energy_trend(&traj(&[3.0, 2.0, 1.0])), -1.0);
        assert_eq!(energy_trend(&traj(&[2.0; 4])), 0.0);
        assert_eq!(energy_trend(&traj(&[5.0])), 0.0);
        assert!(EnergyTrajectory::new(vec![]).is_err());
        assert!(EnergyTrajectory::new(vec![-1.0]).is_err());
    }

    #[test]
    fn strategy_table() {
        let c = select_strategy(-0.5, DEFAULT_TREND_TOL).unwrap();
        assert_eq!(
            (c.strategy, c.alpha, c.beta),
            (Strategy::Comfort, 0.85, 1.2)
        );
        let e = select_strategy(0.3, DEFAULT_TREND_TOL).unwrap();
        assert_eq!(
            (e.strategy, e.alpha, e.beta),
            (Strategy::Encourage, 1.0, 1.1)
        );
        let n = select_strategy(0.0, DEFAULT_TREND_TOL).unwrap();
        assert_eq!(
            (n.strategy, n.alpha, n.beta),
            (Strategy::Neutral, 0.95, 1.0)
        );
        assert_eq!(
            select_strategy(5e-7, 1e-6).unwrap().strategy,
            Strategy::Neutral
        );
        assert!(select_strategy(f64::NAN, 1e-6).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(fusion_weights(&[1.0, 1.0], 1e-3).unwrap(), vec![0.5, 0.5]);
        let w = fusion_weights(&[1.0, 3.0], 1e-3).unwrap();
        assert!((w[0] - 0.74987).abs() < 1e-4 && (w[1] - 0.25013).abs() < 1e-4);
        let w = fusion_weights(&[0.0, 9.0], 1e-3).unwrap();
        assert!((w[0] - 0.99989).abs() < 1e-4);
        assert!(fusion_weights(&[1.0], 0.0).is_err());
        assert!(fusion_weights(&[1.0], -1.0).is_err());
    }

    #[test]
    fn style_examples() {
        let s = vec![0.3, -1.25, 4.0];
        let w = fusion_weights(&[0.1, 2.0, 7.0], 1e-3).unwrap();
        assert_eq!(
            fuse_styles(&[s.clone(), s.clone(), s.clone()], &w)
                .unwrap()
                .len(),
            3
        );
        let same = fuse_styles(&[s.clone(), s.clone()], &[0.5, 0.5]).unwrap();
        assert_eq!(same, s);
        let h = fuse_styles(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[0.5, 0.5]).unwrap();
        assert_eq!(h, vec![0.5, 0.5]);
        assert!(fuse_styles(&[vec![1.0], vec![1.0, 2.0]], &[0.5, 0.5]).is_err());
        assert!(fuse_styles(&[vec![1.0]], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn fuse_matches_scalar_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let styles: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect())
            .collect();
        let w = fusion_weights(&[0.4, 1.7, 0.05], 1e-3).unwrap();
        let got = fuse_styles(&styles, &w).unwrap();
        for j in 0..6 {
            let mut acc = 0.0;
            for k in 0..3 {
                acc += w[k] * styles[k][j];
            }
            assert!((got[j] - acc).abs() < 1e-12);
        }
    }

    fn turn_with_features(index: usize, rows: Vec<Vec<f64>>) -> Turn {
        let n = rows.len();
        let d = rows[0].len();
        let m = Mat::from_shape_vec((n, d), rows.concat()).unwrap();
        let mut t = Turn::new(
            index,
            if index.is_multiple_of(2) {
                Role::Speaker
            } else {
                Role::Listener
            },
            "x",
        );
        t.features = Some(FeatureMatrix::new(m, 100.0, FeatureScale::LinearPower).unwrap());
        t
    }

    #[test]
    fn trajectory_from_features() {
        let turns = vec![
            turn_with_features(0, vec![vec![3.0, 4.0], vec![0.0, 0.0]]),
            turn_with_features(1, vec![vec![1.0, 0.0]]),
            turn_with_features(2, vec![vec![6.0, 8.0], vec![0.0, 2.0]]),
        ];
        let t = energy_trajectory_of(&turns, 2, 160).unwrap();
        assert_eq!(t.energies(), &[2.5, 1.0, 6.0]);
        let rev: Vec<Turn> = turns.iter().rev().cloned().collect();
        let r = energy_trajectory_of(&rev, 2, 160).unwrap();
        assert_eq!(r.energies(), &[6.0, 1.0, 2.5]);
    }

    #[test]
    fn silent_turn_and_missing_audio() {
        let mut t = Turn::new(0, Role::Speaker, "hi");
        t.waveform = Some(Waveform::new(vec![0.0; 1600], 16000).unwrap());
        assert_eq!(
            energy_trajectory_of(&[t], 128, 160).unwrap().energies(),
            &[0.0]
        );
        let bare = Turn::new(3, Role::Speaker, "hi");
        let err = energy_trajectory_of(&[bare], 128, 160).unwrap_err();
        assert!(matches!(err, Error::MissingAudio { turn: 3 }));
        assert!(err.to_string().contains('3'));
    }

    fn sample_record() -> ControlRecord {
        ControlRecord {
            version: 1,
            text: "i am here with you.".into(),
            strategy: Strategy::Comfort,
            alpha: 0.85,
            beta: 1.2,
            fused_style: vec![0.5, -0.25],
            turns: vec![
                TurnControl {
                    index: 0,
                    energy: 2.0,
                    weight: 0.25,
                },
                TurnControl {
                    index: 1,
                    energy: 0.5,
                    weight: 0.75,
                },
            ],
        }
    }

    #[test]
    fn record_golden_bytes() {
        let golden = include_str!("../tests/data/control_record.json");
        assert_eq!(sample_record().to_json().unwrap(), golden);
        assert_eq!(ControlRecord::from_json(golden).unwrap(), sample_record());
    }

    #[test]
    fn record_errors() {
        let mut v: serde_json::Value = serde_json::to_value(sample_record()).unwrap();
        v["version"] = 2.into();
        assert!(matches!(
            ControlRecord::from_json(&v.to_string()),
            Err(Error::SchemaVersion {
                expected: 1,
                found: 2
            })
        ));
        let obj = v.as_object_mut().unwrap();
        obj.remove("alpha");
        obj.remove("turns");
        match ControlRecord::from_json(&v.to_string()) {
            Err(Error::MissingFields(f)) => assert_eq!(f, vec!["alpha", "turns"]),
            other => panic!("expected missing fields, got {other:?}"),
        }
    }

    fn strategy() -> impl proptest::strategy::Strategy<Value = super::Strategy> {
        prop_oneof![
            Just(Strategy::Comfort),
            Just(Strategy::Encourage),
            Just(Strategy::Neutral)
        ]
    }

    proptest! {
        #[test]
        fn record_roundtrip(
            text in ".*",
            s in strategy(),
            style in proptest::collection::vec(-1e6f64..1e6, 0..8),
            turns in proptest::collection::vec((0usize..50, 0.0f64..1e3, 0.0f64..=1.0), 0..6),
        ) {
            let (alpha, beta) = s.prosody();
            let r = ControlRecord {
                version: CONTROL_SCHEMA_VERSION,
                text,
                strategy: s,
                alpha,
                beta,
                fused_style: style,
                turns: turns
                    .into_iter()
                    .map(|(index, energy, weight)| TurnControl { index, energy, weight })
                    .collect(),
            };
            prop_assert_eq!(ControlRecord::from_json(&r.to_json().unwrap()).unwrap(), r);
        }

        #[test]
        fn weights_normalized_and_ordered(e in proptest::collection::vec(0.0f64..100.0, 1..20)) {
            let w = fusion_weights(&e, DEFAULT_EPSILON).unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for a in 0..e.len() {
                prop_assert!(w[a] > 0.0 && w[a] <= 1.0);
                for b in 0..e.len() {
                    if e[a] < e[b] {
                        prop_assert!(w[a] > w[b]);
                    }
                }
            }
        }

        #[test]
        fn fused_style_in_convex_hull(
            styles in proptest::collection::vec(proptest::collection::vec(-10.0f64..10.0, 4), 1..6),
            seed in 0u64..1000,
        ) {
            let e: Vec<f64> = (0..styles.len()).map(|k| ((seed + k as u64 * 37) % 11) as f64).collect();
            let w = fusion_weights(&e, DEFAULT_EPSILON).unwrap();
            let f = fuse_styles(&styles, &w).unwrap();
            for j in 0..4 {
                let lo = styles.iter().map(|s| s[j]).fold(f64::INFINITY, f64::min);
                let hi = styles.iter().map(|s| s[j]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(f[j] >= lo - 1e-9 && f[j] <= hi + 1e-9);
            }
        }

        #[test]
        fn trend_matches_endpoint_oracle(e in proptest::collection::vec(0.0f64..50.0, 2..20)) {
            let n = e.len();
            let oracle = (e[n - 1] - e[0]) / (n as f64 - 1.0);
            prop_assert!((energy_trend(&traj(&e)) - oracle).abs() <= 1e-12);
        }

        #[test]
        fn amplitude_scaling_scales_energy(c in 0.1f64..5.0) {
            let w = Waveform::new(
                (0..3200).map(|i| (i as f64 * 0.05).sin() * 0.3).collect(),
                16000,
            )
            .unwrap();
            let mut a = Turn::new(0, Role::Speaker, "a");
            a.waveform = Some(w.clone());
            let mut b = Turn::new(0, Role::Speaker, "a");
            b.waveform = Some(w.scaled(c));
            let ea = turn_energy(&a, 32, 160).unwrap();
            let eb = turn_energy(&b, 32, 160).unwrap();
            // power spectra scale with c²
            prop_assert!((eb - c * c * ea).abs() <= 1e-9 * eb.max(1.0));
        }
    }
}
