//! Offline metrics over session traces and trajectory files: Hits@K curves,
//! hybrid-feedback oracle and random-select rates, mode comparison tables
//! and per-stage latency statistics. Rates are percentages in `[0, 100]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::curation::TrajectoryRecord;
use crate::session::{SessionTrace, Stage, StageLatencies};

/// Fraction of queries routed to visual feedback by the random-select
/// baseline.
pub const DEFAULT_VISUAL_FRACTION: f64 = 0.223;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no sessions to evaluate")]
    EmptyTraceSet,
    #[error("sessions disagree on max_rounds ({0} vs {1})")]
    InconsistentHorizon(u32, u32),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{0} out of range")]
    OutOfRange(String),
    #[error("target {0:?} is not paired across modes")]
    UnpairedSessions(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HitsConvention {
    /// Hit at length t when the target was in the top K at any round <= t.
    Cumulative,
    /// Hit at length t when the target is in the top K at round t.
    PerRound,
}

impl HitsConvention {
    pub fn as_str(self) -> &'static str {
        match self {
            HitsConvention::Cumulative => "cumulative",
            HitsConvention::PerRound => "per_round",
        }
    }
}

impl fmt::Display for HitsConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HitsConvention {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cumulative" => Ok(HitsConvention::Cumulative),
            "per_round" | "per-round" => Ok(HitsConvention::PerRound),
            other => Err(format!("unknown convention {other:?}")),
        }
    }
}

/// The retrieval rank of the target at each dialog length of one session.
/// `None` marks a round that errored or never ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOutcome {
    pub session_id: String,
    pub target_id: String,
    pub mode: String,
    pub max_rounds: Option<u32>,
    pub ranks: Vec<Option<usize>>,
}

impl SessionOutcome {
    /// `None` when the trace has no target to score against.
    pub fn from_trace(trace: &SessionTrace) -> Option<Self> {
        let target_id = trace.target_id.clone()?;
        let mut ranks = Vec::new();
        for r in &trace.rounds {
            place(&mut ranks, r.round, r.error.is_none(), r.rank_of_target);
        }
        Some(Self {
            session_id: trace.session_id.clone(),
            target_id,
            mode: trace.config.mode.kind.as_str().to_string(),
            max_rounds: Some(trace.config.max_rounds),
            ranks,
        })
    }

    /// Groups records by session. Records without a target are dropped.
    /// Output is ordered by session id.
    pub fn from_records(records: &[TrajectoryRecord]) -> Vec<Self> {
        let mut by_session: BTreeMap<&str, Self> = BTreeMap::new();
        for r in records {
            let Some(target) = &r.target_id else { continue };
            let entry = by_session.entry(&r.session_id).or_insert_with(|| Self {
                session_id: r.session_id.clone(),
                target_id: target.clone(),
                mode: r.mode.clone(),
                max_rounds: r.max_rounds,
                ranks: Vec::new(),
            });
            place(&mut entry.ranks, r.round, r.error.is_none(), r.rank_of_target);
        }
        by_session.into_values().collect()
    }

    fn hit_per_round(&self, t: usize, k: usize) -> bool {
        matches!(self.ranks.get(t), Some(Some(rank)) if *rank <= k)
    }

    /// Whether the session counts as a hit at dialog length `t`.
    pub fn hit(&self, t: usize, k: usize, convention: HitsConvention) -> bool {
        match convention {
            HitsConvention::PerRound => self.hit_per_round(t, k),
            HitsConvention::Cumulative => (0..=t).any(|u| self.hit_per_round(u, k)),
        }
    }

    /// First dialog length with the target in the top K.
    pub fn first_hit(&self, k: usize) -> Option<usize> {
        (0..self.ranks.len()).find(|&t| self.hit_per_round(t, k))
    }
}

// A retried round overwrites an earlier errored attempt but never the other
// way round.
fn place(ranks: &mut Vec<Option<usize>>, round: u32, ok: bool, rank: Option<usize>) {
    let t = round as usize;
    if ranks.len() <= t {
        ranks.resize(t + 1, None);
    }
    if ok {
        ranks[t] = rank;
    }
}

/// Shared horizon of a set of sessions, in rounds after the initial query.
fn horizon(outcomes: &[SessionOutcome]) -> Result<u32, EvalError> {
    let mut declared: Option<u32> = None;
    for o in outcomes {
        if let Some(t) = o.max_rounds {
            match declared {
                Some(d) if d != t => return Err(EvalError::InconsistentHorizon(d, t)),
                _ => declared = Some(t),
            }
        }
    }
    let observed = outcomes
        .iter()
        .map(|o| o.ranks.len().saturating_sub(1) as u32)
        .max()
        .unwrap_or(0);
    Ok(declared.unwrap_or(observed).max(observed))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitsCurve {
    pub k: usize,
    pub convention: HitsConvention,
    pub n_sessions: usize,
    /// One rate per dialog length `0..=T`.
    pub rates: Vec<f64>,
}

pub fn hits_curve(
    outcomes: &[SessionOutcome],
    k: usize,
    convention: HitsConvention,
) -> Result<HitsCurve, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if outcomes.is_empty() {
        return Err(EvalError::EmptyTraceSet);
    }
    let t_max = horizon(outcomes)? as usize;
    let n = outcomes.len();
    let rates = (0..=t_max)
        .map(|t| {
            let hits = outcomes.iter().filter(|o| o.hit(t, k, convention)).count();
            100.0 * hits as f64 / n as f64
        })
        .collect();
    Ok(HitsCurve {
        k,
        convention,
        n_sessions: n,
        rates,
    })
}

fn check_rate(name: &str, r: f64) -> Result<(), EvalError> {
    if (0.0..=100.0).contains(&r) {
        Ok(())
    } else {
        Err(EvalError::OutOfRange(format!("{name} = {r}")))
    }
}

/// Expected rate when a fraction `p` of queries gets visual feedback, chosen
/// independently of the query.
pub fn random_select_rate(p: f64, verbal_rate: f64, visual_rate: f64) -> Result<f64, EvalError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(EvalError::OutOfRange(format!("p = {p}")));
    }
    check_rate("verbal rate", verbal_rate)?;
    check_rate("visual rate", visual_rate)?;
    Ok((1.0 - p) * verbal_rate + p * visual_rate)
}

/// Rate under perfect per-query channel selection: a query succeeds when
/// either channel succeeds.
pub fn oracle_rate(pairs: &[(bool, bool)]) -> Result<f64, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyTraceSet);
    }
    let hits = pairs.iter().filter(|(a, b)| *a || *b).count();
    Ok(100.0 * hits as f64 / pairs.len() as f64)
}

/// Matches sessions of two modes by target id.
pub fn pair_by_target<'a>(
    verbal: &'a [SessionOutcome],
    visual: &'a [SessionOutcome],
) -> Result<Vec<(&'a SessionOutcome, &'a SessionOutcome)>, EvalError> {
    let mut by_target: HashMap<&str, &SessionOutcome> = HashMap::new();
    for o in visual {
        if by_target.insert(&o.target_id, o).is_some() {
            return Err(EvalError::UnpairedSessions(o.target_id.clone()));
        }
    }
    if verbal.len() != visual.len() {
        let missing = verbal
            .iter()
            .find(|o| !by_target.contains_key(o.target_id.as_str()))
            .or_else(|| visual.iter().find(|v| !verbal.iter().any(|o| o.target_id == v.target_id)))
            .map(|o| o.target_id.clone())
            .unwrap_or_default();
        return Err(EvalError::UnpairedSessions(missing));
    }
    let mut pairs = Vec::with_capacity(verbal.len());
    for o in verbal {
        match by_target.remove(o.target_id.as_str()) {
            Some(v) => pairs.push((o, v)),
            None => return Err(EvalError::UnpairedSessions(o.target_id.clone())),
        }
    }
    Ok(pairs)
}

/// Oracle curve over sessions paired by target.
pub fn oracle_curve(
    verbal: &[SessionOutcome],
    visual: &[SessionOutcome],
    k: usize,
    convention: HitsConvention,
) -> Result<HitsCurve, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if verbal.is_empty() || visual.is_empty() {
        return Err(EvalError::EmptyTraceSet);
    }
    let pairs = pair_by_target(verbal, visual)?;
    let t_verbal = horizon(verbal)?;
    let t_visual = horizon(visual)?;
    if t_verbal != t_visual {
        return Err(EvalError::InconsistentHorizon(t_verbal, t_visual));
    }
    let rates = (0..=t_verbal as usize)
        .map(|t| {
            let hits: Vec<(bool, bool)> = pairs
                .iter()
                .map(|(a, b)| (a.hit(t, k, convention), b.hit(t, k, convention)))
                .collect();
            oracle_rate(&hits)
        })
        .collect::<Result<_, _>>()?;
    Ok(HitsCurve {
        k,
        convention,
        n_sessions: pairs.len(),
        rates,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSelect {
    pub p: f64,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridRow {
    pub dialog_length: usize,
    pub verbal: f64,
    pub visual: f64,
    pub oracle: f64,
    pub random_select: f64,
    pub oracle_gain: f64,
    pub random_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridReport {
    pub verbal: HitsCurve,
    pub visual: HitsCurve,
    pub oracle: HitsCurve,
    pub random_select: RandomSelect,
}

impl HybridReport {
    pub fn build(
        verbal: &[SessionOutcome],
        visual: &[SessionOutcome],
        k: usize,
        convention: HitsConvention,
        p: f64,
    ) -> Result<Self, EvalError> {
        let oracle = oracle_curve(verbal, visual, k, convention)?;
        let verbal = hits_curve(verbal, k, convention)?;
        let visual = hits_curve(visual, k, convention)?;
        let rates = verbal
            .rates
            .iter()
            .zip(&visual.rates)
            .map(|(a, b)| random_select_rate(p, *a, *b))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            verbal,
            visual,
            oracle,
            random_select: RandomSelect { p, rates },
        })
    }

    /// Table rows with both hybrid columns expressed as gains over verbal.
    pub fn rows(&self) -> Vec<HybridRow> {
        (0..self.verbal.rates.len())
            .map(|t| {
                let verbal = self.verbal.rates[t];
                let oracle = self.oracle.rates[t];
                let random_select = self.random_select.rates[t];
                HybridRow {
                    dialog_length: t,
                    verbal,
                    visual: self.visual.rates[t],
                    oracle,
                    random_select,
                    oracle_gain: oracle - verbal,
                    random_gain: random_select - verbal,
                }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "dialog_length,verbal,visual,oracle,random_select,oracle_gain,random_gain\n",
        );
        for r in self.rows() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.dialog_length,
                fmt2(r.verbal),
                fmt2(r.visual),
                fmt2(r.oracle),
                fmt2(r.random_select),
                fmt2(r.oracle_gain),
                fmt2(r.random_gain),
            );
        }
        out
    }
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    // Nudge by a relative epsilon so decimal halves that land a hair low in
    // binary still round up.
    let scaled = x.abs() * 100.0;
    let r = (scaled * (1.0 + 4.0 * f64::EPSILON) + 0.5).floor() / 100.0;
    r.copysign(x)
}

fn fmt2(x: f64) -> String {
    let r = round2(x);
    if r == 0.0 {
        "0.00".into()
    } else {
        format!("{r:.2}")
    }
}

/// One CSV row per dialog length, one column per named curve.
pub fn compare_modes(curves: &[(String, HitsCurve)]) -> Result<String, EvalError> {
    let Some((_, first)) = curves.first() else {
        return Err(EvalError::EmptyTraceSet);
    };
    let len = first.rates.len();
    for (_, c) in curves {
        if c.rates.len() != len {
            return Err(EvalError::InconsistentHorizon(
                len.saturating_sub(1) as u32,
                c.rates.len().saturating_sub(1) as u32,
            ));
        }
    }
    let mut out = String::from("dialog_length");
    for (name, _) in curves {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for t in 0..len {
        let _ = write!(out, "{t}");
        for (_, c) in curves {
            let _ = write!(out, ",{}", fmt2(c.rates[t]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-round latencies of one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySample {
    pub mode: String,
    pub latency: StageLatencies,
}

impl LatencySample {
    pub fn from_records(records: &[TrajectoryRecord]) -> Vec<Self> {
        records
            .iter()
            .map(|r| Self {
                mode: r.mode.clone(),
                latency: r.latency_ms,
            })
            .collect()
    }

    pub fn from_traces(traces: &[SessionTrace]) -> Vec<Self> {
        traces
            .iter()
            .flat_map(|t| {
                let mode = t.config.mode.kind.as_str().to_string();
                t.rounds.iter().map(move |r| Self {
                    mode: mode.clone(),
                    latency: r.latency_ms,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p95: f64,
}

impl LatencyStats {
    /// `None` for an empty sample.
    pub fn from_values(values: &[u64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_unstable();
        let n = v.len();
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            v[n / 2] as f64
        } else {
            (v[n / 2 - 1] as f64 + v[n / 2] as f64) / 2.0
        };
        // nearest rank
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        Some(Self {
            count: n,
            mean,
            median,
            p95: v[rank - 1] as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeLatency {
    pub rounds: usize,
    /// Keyed by stage name; stages with no samples are absent.
    pub stages: BTreeMap<String, LatencyStats>,
    /// Sum of the stage latencies of each complete round.
    pub compute: Option<LatencyStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub include_agent: bool,
    pub modes: BTreeMap<String, ModeLatency>,
}

const TIMED_STAGES: [Stage; 4] = [Stage::Generate, Stage::Embed, Stage::Retrieve, Stage::Agent];

/// Aggregates latencies per mode and stage. A missing stage entry is left out
/// of that stage's statistics. A round's compute time sums its generate,
/// embed and retrieve stages, plus the agent stage when `include_agent`.
pub fn latency_report(
    samples: &[LatencySample],
    include_agent: bool,
) -> Result<LatencyReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyTraceSet);
    }
    let mut grouped: BTreeMap<&str, Vec<&StageLatencies>> = BTreeMap::new();
    for s in samples {
        grouped.entry(&s.mode).or_default().push(&s.latency);
    }
    let modes = grouped
        .into_iter()
        .map(|(mode, rounds)| {
            let stages = TIMED_STAGES
                .iter()
                .filter_map(|&stage| {
                    let values: Vec<u64> = rounds.iter().filter_map(|l| l.get(stage)).collect();
                    LatencyStats::from_values(&values).map(|s| (stage.to_string(), s))
                })
                .collect();
            let compute: Vec<u64> = rounds
                .iter()
                .filter_map(|l| {
                    // verbal rounds have no generate stage
                    let mut total = l.embed? + l.retrieve? + l.generate.unwrap_or(0);
                    if include_agent {
                        total += l.agent.unwrap_or(0);
                    }
                    Some(total)
                })
                .collect();
            (
                mode.to_string(),
                ModeLatency {
                    rounds: rounds.len(),
                    stages,
                    compute: LatencyStats::from_values(&compute),
                },
            )
        })
        .collect();
    Ok(LatencyReport {
        include_agent,
        modes,
    })
}
