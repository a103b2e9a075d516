//! Closed-form activation-memory accounting for one transformer-style block.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::{keys, CompressionPolicy, LayerKind, RunSummary};

/// Block dimensions. Serialized under the short keys `b`, `s`, `n`, `m` and `h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    #[serde(rename = "b")]
    pub batch: u64,
    #[serde(rename = "s")]
    pub seq_len: u64,
    #[serde(rename = "n")]
    pub width: u64,
    #[serde(rename = "m")]
    pub hidden: u64,
    #[serde(rename = "h")]
    pub heads: u64,
    pub layers: u64,
}

impl ArchSpec {
    pub fn validate(&self) -> Result<()> {
        let ArchSpec {
            batch,
            seq_len,
            width,
            hidden,
            heads,
            layers,
        } = *self;
        if [batch, seq_len, width, hidden, heads, layers].contains(&0) {
            return Err(Error::Parameter(
                "all architecture sizes must be positive".into(),
            ));
        }
        if width % heads != 0 {
            return Err(Error::Parameter(format!(
                "n = {width} is not divisible by h = {heads}"
            )));
        }
        Ok(())
    }

    fn tokens(&self) -> u64 {
        self.batch * self.seq_len
    }
}

/// How a row's tensor is treated by compression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RowClass {
    /// A `b s x width` activation that may be projected.
    Compressible,
    /// Stored at full size in both columns.
    Fixed,
    /// Views and residual adds store nothing.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub operation: String,
    pub class: RowClass,
    /// Width of the compressible activation.
    pub width: Option<u64>,
    pub baseline_scalars: u64,
    pub compressed_scalars: u64,
    pub reduction_fraction: f64,
    /// Whether the training engine implements this row.
    pub engine: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Ledger {
    pub arch: ArchSpec,
    /// Rows of a single block.
    pub rows: Vec<LedgerRow>,
    /// Sums over all rows and all layers.
    pub baseline_total: u64,
    pub compressed_total: u64,
    /// Sums over compressible rows only, all layers.
    pub compressible_baseline: u64,
    pub compressible_compressed: u64,
    /// Scalars held by projection bases across all layers.
    pub basis_scalars: u64,
}

impl Ledger {
    pub fn row(&self, name: &str) -> Option<&LedgerRow> {
        self.rows.iter().find(|r| r.operation == name)
    }

    pub fn reduction_fraction(&self) -> f64 {
        reduction(self.baseline_total, self.compressed_total)
    }

    /// Per-block totals over the rows the training engine implements.
    pub fn engine_totals(&self) -> (u64, u64) {
        self.rows
            .iter()
            .filter(|r| r.engine)
            .fold((0, 0), |(b, c), r| {
                (b + r.baseline_scalars, c + r.compressed_scalars)
            })
    }

    /// Per-block sum of the GeLU input and down-projection input rows.
    pub fn gelu_down_pair(&self) -> (u64, u64) {
        [keys::GELU_INPUT, keys::DOWN_INPUT]
            .iter()
            .filter_map(|k| self.row(k))
            .fold((0, 0), |(b, c), r| {
                (b + r.baseline_scalars, c + r.compressed_scalars)
            })
    }

    /// Aligned table; `element_bytes` adds a byte view when nonzero.
    pub fn to_text(&self, element_bytes: u64) -> String {
        let name_w = self
            .rows
            .iter()
            .map(|r| r.operation.len())
            .max()
            .unwrap_or(9)
            .max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>14}  {:>14}  {:>9}",
            "operation", "baseline", "compressed", "reduction"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<name_w$}  {:>14}  {:>14}  {:>8.2}%",
                r.operation,
                r.baseline_scalars,
                r.compressed_scalars,
                100.0 * r.reduction_fraction
            );
        }
        let (pair_base, pair_comp) = self.gelu_down_pair();
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>14}  {:>14}  {:>8.2}%",
            "gelu+down pair",
            pair_base,
            pair_comp,
            100.0 * reduction(pair_base, pair_comp)
        );
        let _ = writeln!(
            out,
            "{:<name_w$}  {:>14}  {:>14}  {:>8.2}%",
            format!("total x{}", self.arch.layers),
            self.baseline_total,
            self.compressed_total,
            100.0 * self.reduction_fraction()
        );
        let _ = writeln!(out, "basis scalars (separate): {}", self.basis_scalars);
        if element_bytes > 0 {
            let _ = writeln!(
                out,
                "bytes at {element_bytes} per scalar: baseline {}, compressed plus bases {}",
                self.baseline_total * element_bytes,
                (self.compressed_total + self.basis_scalars) * element_bytes
            );
        }
        out
    }
}

fn reduction(baseline: u64, compressed: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - compressed as f64 / baseline as f64
    }
}

/// Rows of one block: attention half (ledger only) followed by the MLP half
/// the engine implements.
pub fn block_ledger(arch: &ArchSpec, policy: &CompressionPolicy) -> Result<Ledger> {
    arch.validate()?;
    policy.validate()?;
    let bs = arch.tokens();
    let ArchSpec {
        width: model_width,
        hidden,
        heads,
        ..
    } = *arch;

    let mut rows = Vec::new();
    let mut basis_per_block = 0u64;
    let mut compressible =
        |name: &str, width: u64, kind: LayerKind, engine: bool| -> Result<LedgerRow> {
            let compressed = policy.stored_scalars(bs, width as usize, kind)?;
            if let Some((r1, r2)) = policy.ranks(width as usize, kind)? {
                basis_per_block += width * (r1 + r2) as u64;
            }
            Ok(row(
                name,
                RowClass::Compressible,
                Some(width),
                bs * width,
                compressed,
                engine,
            ))
        };
    rows.push(compressible(
        "ln1.input",
        model_width,
        LayerKind::Nonlinear,
        false,
    )?);
    rows.push(row(
        "ln1.stats",
        RowClass::Fixed,
        None,
        2 * bs,
        2 * bs,
        false,
    ));
    rows.push(compressible(
        "attn.qkv.input",
        model_width,
        LayerKind::Linear,
        false,
    )?);
    rows.push(row("attn.reshape_qkv", RowClass::Free, None, 0, 0, false));
    let qkv = arch.batch * heads * arch.seq_len * (model_width / heads) * 3;
    rows.push(row(
        "attn.flash.qkv",
        RowClass::Fixed,
        None,
        qkv,
        qkv,
        false,
    ));
    rows.push(row(
        "attn.flash.buffers",
        RowClass::Fixed,
        None,
        2 * bs * heads,
        2 * bs * heads,
        false,
    ));
    rows.push(row("attn.reshape_out", RowClass::Free, None, 0, 0, false));
    rows.push(compressible(
        "attn.out.input",
        model_width,
        LayerKind::Linear,
        false,
    )?);
    rows.push(row("attn.residual", RowClass::Free, None, 0, 0, false));
    rows.push(compressible(
        keys::NORM_INPUT,
        model_width,
        LayerKind::Nonlinear,
        true,
    )?);
    rows.push(row(
        keys::NORM_STATS,
        RowClass::Fixed,
        None,
        2 * bs,
        2 * bs,
        true,
    ));
    rows.push(compressible(
        keys::UP_INPUT,
        model_width,
        LayerKind::Linear,
        true,
    )?);
    rows.push(compressible(
        keys::GELU_INPUT,
        hidden,
        LayerKind::Nonlinear,
        true,
    )?);
    rows.push(compressible(
        keys::DOWN_INPUT,
        hidden,
        LayerKind::Linear,
        true,
    )?);
    rows.push(row(keys::RESIDUAL, RowClass::Free, None, 0, 0, true));

    let layers = arch.layers;
    let sum = |f: &dyn Fn(&LedgerRow) -> u64, only_compressible: bool| -> u64 {
        layers
            * rows
                .iter()
                .filter(|r| !only_compressible || r.class == RowClass::Compressible)
                .map(f)
                .sum::<u64>()
    };
    Ok(Ledger {
        arch: *arch,
        baseline_total: sum(&|r| r.baseline_scalars, false),
        compressed_total: sum(&|r| r.compressed_scalars, false),
        compressible_baseline: sum(&|r| r.baseline_scalars, true),
        compressible_compressed: sum(&|r| r.compressed_scalars, true),
        basis_scalars: layers * basis_per_block,
        rows,
    })
}

fn row(
    name: &str,
    class: RowClass,
    width: Option<u64>,
    baseline: u64,
    compressed: u64,
    engine: bool,
) -> LedgerRow {
    LedgerRow {
        operation: name.to_string(),
        class,
        width,
        baseline_scalars: baseline,
        compressed_scalars: compressed,
        reduction_fraction: reduction(baseline, compressed),
        engine,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileLine {
    pub operation: String,
    pub expected: u64,
    pub observed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReconcileReport {
    pub lines: Vec<ReconcileLine>,
    pub expected_per_step: u64,
    pub steps_checked: u64,
}

/// Checks an engine run's stored scalars against the ledger's engine rows.
///
/// `per_step` are the totals recorded at each step. Fails on the first row
/// (in ledger order) whose observed count differs, or on the first step
/// whose total differs.
pub fn reconcile(
    ledger: &Ledger,
    summary: &RunSummary,
    per_step: &[u64],
) -> Result<ReconcileReport> {
    if ledger.arch.layers != 1 {
        return Err(Error::Parameter(
            "the engine trains a single block; reconcile needs layers = 1".into(),
        ));
    }
    let mut lines = Vec::new();
    for r in ledger.rows.iter().filter(|r| r.engine) {
        let observed = summary.storage_rows.get(&r.operation).copied().unwrap_or(0);
        if observed != r.compressed_scalars {
            return Err(Error::Reconciliation {
                row: r.operation.clone(),
                expected: r.compressed_scalars,
                observed,
            });
        }
        lines.push(ReconcileLine {
            operation: r.operation.clone(),
            expected: r.compressed_scalars,
            observed,
        });
    }
    let known: BTreeMap<&str, ()> = lines.iter().map(|l| (l.operation.as_str(), ())).collect();
    if let Some((name, &observed)) = summary
        .storage_rows
        .iter()
        .find(|(k, _)| !known.contains_key(k.as_str()))
    {
        return Err(Error::Reconciliation {
            row: name.clone(),
            expected: 0,
            observed,
        });
    }
    let (_, expected_per_step) = ledger.engine_totals();
    for (t, &total) in per_step.iter().enumerate() {
        if total != expected_per_step {
            return Err(Error::Reconciliation {
                row: format!("total@step{t}"),
                expected: expected_per_step,
                observed: total,
            });
        }
    }
    Ok(ReconcileReport {
        lines,
        expected_per_step,
        steps_checked: per_step.len() as u64,
    })
}
