//! Numerical checks of the source-loss and transfer inequalities against
//! recorded training traces.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{LrSchedule, RoundConfig, RoundRecord};
use crate::models::{ModelSpec, Smoothness};
use crate::statistics::{self, CrossClientStats};
use crate::transfer::{DiscrepancyEstimate, HeadFit};

/// Absolute tolerance for checks built from exactly computable quantities.
pub const CERTIFIED_TOLERANCE: f64 = 1e-9;
/// Absolute tolerance once estimated quantities enter a check.
pub const DIAGNOSTIC_TOLERANCE: f64 = 1e-6;

pub const HISTORY_VERSION: &str = "fedxfer-history v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundId {
    RoundUb,
    TelescopedSource,
    Lemma1Full,
    Theorem2AppendixForm,
    Theorem2MaintextForm,
    Theorem1,
}

impl BoundId {
    pub fn name(self) -> &'static str {
        match self {
            BoundId::RoundUb => "round-ub",
            BoundId::TelescopedSource => "telescoped-source",
            BoundId::Lemma1Full => "lemma1-full",
            BoundId::Theorem2AppendixForm => "theorem2-appendix-form",
            BoundId::Theorem2MaintextForm => "theorem2-maintext-form",
            BoundId::Theorem1 => "theorem1",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EntryScope {
    /// Compares source losses after `round` rounds.
    Source,
    /// The closing inequality on the target loss.
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundEntry {
    pub round: usize,
    pub scope: EntryScope,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`
    pub slack: f64,
    pub violated: bool,
    /// Per-round decrease of the right-hand side, where one is defined.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub decrement: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_id: BoundId,
    pub entries: Vec<BoundEntry>,
    pub alpha_used: f64,
    pub certified: bool,
    pub tolerance: f64,
    pub notes: Vec<String>,
}

/// One JSONL line of a serialized report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundLine {
    pub bound_id: BoundId,
    #[serde(flatten)]
    pub entry: BoundEntry,
    pub alpha_used: f64,
    pub certified: bool,
    pub tolerance: f64,
}

impl BoundReport {
    fn new(bound_id: BoundId, alpha_used: f64, certified: bool, notes: Vec<String>) -> Self {
        Self {
            bound_id,
            entries: Vec::new(),
            alpha_used,
            certified,
            tolerance: if certified {
                CERTIFIED_TOLERANCE
            } else {
                DIAGNOSTIC_TOLERANCE
            },
            notes,
        }
    }

    fn push(&mut self, round: usize, scope: EntryScope, lhs: f64, rhs: f64, decrement: Option<f64>) {
        let slack = rhs - lhs;
        self.entries.push(BoundEntry {
            round,
            scope,
            lhs,
            rhs,
            slack,
            // NaN slack counts as a violation.
            violated: !(slack >= -self.tolerance),
            decrement,
        });
    }

    pub fn violations(&self) -> usize {
        self.entries.iter().filter(|e| e.violated).count()
    }

    pub fn min_slack(&self) -> Option<f64> {
        self.entries.iter().map(|e| e.slack).reduce(f64::min)
    }

    pub fn last(&self) -> Option<&BoundEntry> {
        self.entries.last()
    }

    pub fn lines(&self) -> impl Iterator<Item = BoundLine> + '_ {
        self.entries.iter().map(|e| BoundLine {
            bound_id: self.bound_id,
            entry: e.clone(),
            alpha_used: self.alpha_used,
            certified: self.certified,
            tolerance: self.tolerance,
        })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for line in self.lines() {
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::Internal(e.to_string()))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Run settings needed to decide whether a trace may be certified.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryMeta {
    pub spec: ModelSpec,
    pub config: RoundConfig,
    pub num_clients: usize,
    pub smoothness: Smoothness,
    /// `L_src(h_0)`
    pub initial_loss: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct HistoryHeader {
    format: String,
    #[serde(flatten)]
    meta: HistoryMeta,
}

/// Writes a header line followed by one record per line.
pub fn write_history<W: Write>(mut out: W, meta: &HistoryMeta, history: &[RoundRecord]) -> Result<()> {
    let header = HistoryHeader {
        format: HISTORY_VERSION.to_string(),
        meta: meta.clone(),
    };
    let json = |e: serde_json::Error| Error::Internal(e.to_string());
    serde_json::to_writer(&mut out, &header).map_err(json)?;
    out.write_all(b"\n")?;
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(json)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_history<R: BufRead>(input: R) -> Result<(HistoryMeta, Vec<RoundRecord>)> {
    let mut meta = None;
    let mut history = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let no = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |e: serde_json::Error| Error::Parse {
            line: no,
            message: e.to_string(),
        };
        if meta.is_none() {
            let h: HistoryHeader = serde_json::from_str(&line).map_err(parse)?;
            if h.format != HISTORY_VERSION {
                return Err(Error::Parse {
                    line: no,
                    message: format!("unsupported history format {:?}", h.format),
                });
            }
            meta = Some(h.meta);
        } else {
            history.push(serde_json::from_str::<RoundRecord>(&line).map_err(parse)?);
        }
    }
    let meta = meta.ok_or(Error::Parse {
        line: 1,
        message: "missing history header".into(),
    })?;
    Ok((meta, history))
}

/// Reasons the round-wise bound cannot be certified on this trace; empty
/// when every precondition holds.
pub fn certification_issues(meta: &HistoryMeta, history: &[RoundRecord], alpha: Smoothness) -> Vec<String> {
    let mut issues = Vec::new();
    if !meta.spec.is_convex() {
        issues.push("model is not convex".to_string());
    }
    if !alpha.certified {
        issues.push("smoothness constant is an empirical estimate".to_string());
    }
    if !meta.config.is_single_gd_step() {
        issues.push("local training is not a single full-batch gradient step".to_string());
    }
    if let Some(r) = history.iter().find(|r| r.participants.len() != meta.num_clients) {
        issues.push(format!("round {} does not have full participation", r.round));
    }
    if let Some(r) = history.iter().find(|r| r.effective_xi != 0.0) {
        issues.push(format!(
            "round {} applies a regularizer (xi = {})",
            r.round, r.effective_xi
        ));
    }
    issues
}

fn check_chain(initial_loss: f64, history: &[RoundRecord]) -> Result<()> {
    let mut prev = initial_loss;
    for (i, r) in history.iter().enumerate() {
        if r.round != i + 1 {
            return Err(Error::invalid(format!(
                "history out of order at entry {i}: round {}",
                r.round
            )));
        }
        if r.pre_loss != prev {
            return Err(Error::invalid(format!(
                "round {} does not start from the previous round's loss",
                r.round
            )));
        }
        prev = r.post_loss;
    }
    Ok(())
}

fn positivity_notes(history: &[RoundRecord], alpha: f64) -> Result<Vec<String>> {
    let mut notes = Vec::new();
    for r in history {
        let c = statistics::beta_coefficients(r.learning_rate, alpha)?;
        if r.learning_rate > 0.0 && !c.is_positive() {
            notes.push(format!(
                "round {}: learning rate {} >= 2/alpha, beta1 <= 0",
                r.round, r.learning_rate
            ));
            break;
        }
    }
    Ok(notes)
}

/// `L_src(h_{p+1}) <= L_src(h_p) - beta_1 |J_p|^2 + beta_2 sigma_p^2` for each
/// recorded round. Traces outside the lemma's settings are checked in
/// diagnostic mode.
pub fn verify_round_bound(meta: &HistoryMeta, history: &[RoundRecord], alpha: Smoothness) -> Result<BoundReport> {
    let issues = certification_issues(meta, history, alpha);
    let mut notes = positivity_notes(history, alpha.alpha)?;
    let certified = issues.is_empty();
    notes.extend(issues);
    let mut report = BoundReport::new(BoundId::RoundUb, alpha.alpha, certified, notes);
    for r in history {
        let rhs = statistics::round_bound_rhs(r.pre_loss, r.learning_rate, alpha.alpha, &r.stats)?;
        report.push(r.round, EntryScope::Source, r.post_loss, rhs, Some(r.pre_loss - rhs));
    }
    Ok(report)
}

/// Running source-only form of the telescoped bound:
/// `L_src(h_p) <= L_src(h_0) - sum beta_1 |J_q|^2 + sum beta_2 sigma_q^2`,
/// one entry per prefix; the last entry is the final inequality.
pub fn verify_telescoped_source(
    meta: &HistoryMeta,
    history: &[RoundRecord],
    alpha: Smoothness,
    initial_loss: f64,
) -> Result<BoundReport> {
    check_chain(initial_loss, history)?;
    let issues = certification_issues(meta, history, alpha);
    let mut notes = positivity_notes(history, alpha.alpha)?;
    let certified = issues.is_empty();
    notes.extend(issues);
    let mut report = BoundReport::new(BoundId::TelescopedSource, alpha.alpha, certified, notes);
    let mut rhs = initial_loss;
    for r in history {
        let next = statistics::round_bound_rhs(rhs, r.learning_rate, alpha.alpha, &r.stats)?;
        report.push(r.round, EntryScope::Source, r.post_loss, next, Some(rhs - next));
        rhs = next;
    }
    Ok(report)
}

/// Full transfer form: the target loss after finetuning is at most the
/// telescoped source bound plus the feature-level discrepancy. Diagnostic,
/// since the discrepancy is a lower-bound estimate.
pub fn verify_lemma1_full(
    meta: &HistoryMeta,
    history: &[RoundRecord],
    alpha: Smoothness,
    initial_loss: f64,
    d_estimate: &DiscrepancyEstimate,
    final_target_loss: f64,
) -> Result<BoundReport> {
    let source = verify_telescoped_source(meta, history, alpha, initial_loss)?;
    let mut notes = source.notes.clone();
    notes.push(lower_bound_note());
    let mut report = BoundReport::new(BoundId::Lemma1Full, alpha.alpha, false, notes);
    for e in &source.entries {
        report.push(e.round, EntryScope::Source, e.lhs, e.rhs, e.decrement);
    }
    let source_rhs = source.last().map_or(initial_loss, |e| e.rhs);
    report.push(
        history.len(),
        EntryScope::Target,
        final_target_loss,
        source_rhs + d_estimate.value,
        None,
    );
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Theorem2Form {
    /// Decrement `|J|^4 / (2 alpha (sigma^2 + |J|^2))`.
    Appendix,
    /// Decrement `2 |J|^4 / (alpha (sigma^2 + |J|^2))`.
    Maintext,
}

/// Per-round right-hand-side decrease under the optimal learning rate.
pub fn theorem2_decrement(stats: &CrossClientStats, alpha: f64, form: Theorem2Form) -> f64 {
    let j2 = stats.avg_norm_sq();
    let denom = stats.variance + j2;
    if denom == 0.0 {
        return 0.0;
    }
    match form {
        Theorem2Form::Appendix => j2 * j2 / (2.0 * alpha * denom),
        Theorem2Form::Maintext => 2.0 * j2 * j2 / (alpha * denom),
    }
}

fn lower_bound_note() -> String {
    "discrepancy is a lower-bound estimate: it can only shrink the right-hand side, \
     so a satisfied check is evidence while a violation is inconclusive"
        .to_string()
}

/// Bound on the finetuned target loss for runs using the optimal
/// learning-rate schedule. Per-round entries track the source-loss part; the
/// closing entry adds `d_estimate` and compares against the target loss.
pub fn verify_theorem2(
    meta: &HistoryMeta,
    history: &[RoundRecord],
    alpha: Smoothness,
    initial_loss: f64,
    d_estimate: &DiscrepancyEstimate,
    final_target_loss: f64,
    form: Theorem2Form,
) -> Result<BoundReport> {
    if !matches!(meta.config.lr_schedule, LrSchedule::OptimalFromStats { .. }) {
        return Err(Error::invalid(
            "this bound requires the optimal-from-stats learning-rate schedule",
        ));
    }
    check_chain(initial_loss, history)?;
    let id = match form {
        Theorem2Form::Appendix => BoundId::Theorem2AppendixForm,
        Theorem2Form::Maintext => BoundId::Theorem2MaintextForm,
    };
    let mut notes = certification_issues(meta, history, alpha);
    notes.push(lower_bound_note());
    let mut report = BoundReport::new(id, alpha.alpha, false, notes);
    let mut rhs = initial_loss;
    for r in history {
        let dec = theorem2_decrement(&r.stats, alpha.alpha, form);
        rhs -= dec;
        report.push(r.round, EntryScope::Source, r.post_loss, rhs, Some(dec));
    }
    report.push(
        history.len(),
        EntryScope::Target,
        final_target_loss,
        rhs + d_estimate.value,
        None,
    );
    Ok(report)
}

/// `L*_tgt <= (1/K) sum_k L_k(h*_k) + d_H + d_GF`, always diagnostic.
pub fn verify_theorem1(
    local_optima: &[HeadFit],
    cross_client: &DiscrepancyEstimate,
    gf: &DiscrepancyEstimate,
    target_loss: f64,
) -> Result<BoundReport> {
    if local_optima.is_empty() {
        return Err(Error::invalid("need at least one local optimum"));
    }
    let mut notes = vec![lower_bound_note()];
    let unconverged: Vec<usize> = local_optima
        .iter()
        .enumerate()
        .filter(|(_, f)| !f.converged)
        .map(|(k, _)| k)
        .collect();
    if !unconverged.is_empty() {
        notes.push(format!("local optima not converged for clients {unconverged:?}"));
    }
    if gf.budget_exhausted {
        notes.push("a head fit inside the feature-level discrepancy hit its budget".to_string());
    }
    let avg = local_optima.iter().map(|f| f.loss).sum::<f64>() / local_optima.len() as f64;
    let mut report = BoundReport::new(BoundId::Theorem1, f64::NAN, false, notes);
    report.push(
        0,
        EntryScope::Target,
        target_loss,
        avg + cross_client.value + gf.value,
        None,
    );
    Ok(report)
}
