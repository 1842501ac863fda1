//! Overlap of activated FFN neurons between the label slots and `[MASK]`.
//!
//! A neuron is active at a position when its post-GELU value in the first
//! FFN dense layer is positive. The overlap of two positions is
//! `|A ∩ B| / (|A| + |B|)`, which lies in `[0, 0.5]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::Instance;
use crate::encoder::encode;
use crate::model::{LabelPromptModel, ModelError};
use crate::scalar::{gelu, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error("activation sequences differ in length ({0} vs {1})")]
    Length(usize, usize),
    #[error("layer {layer} out of range for {n_layers} layers")]
    Layer { layer: usize, n_layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: String, source: csv::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: malformed row {row}: {message}")]
    Malformed { path: String, row: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Io { path: path.display().to_string(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> AnalysisError + '_ {
    move |source| AnalysisError::Csv { path: path.display().to_string(), source }
}

/// Post-GELU FFN values at one position and their sign pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivatedSequence<S> {
    pub values: Vec<S>,
    pub active: Vec<bool>,
}

impl<S: Scalar> ActivatedSequence<S> {
    pub fn new(values: Vec<S>) -> Self {
        let active = values.iter().map(|&v| v > S::zero()).collect();
        Self { values, active }
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }
}

/// Overlap rate of two sign patterns; `0` when neither has an active neuron.
pub fn on_rate_masks(a: &[bool], b: &[bool]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::Length(a.len(), b.len()));
    }
    let (mut both, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    Ok(if na + nb == 0 { 0.0 } else { both as f64 / (na + nb) as f64 })
}

pub fn on_rate<S: Scalar>(a: &ActivatedSequence<S>, b: &ActivatedSequence<S>) -> Result<f64, AnalysisError> {
    on_rate_masks(&a.active, &b.active)
}

/// Activations at every label slot and at `[MASK]` for one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptActivations<S> {
    pub gold: usize,
    pub labels: Vec<ActivatedSequence<S>>,
    pub mask: ActivatedSequence<S>,
}

fn resolve_layer<S: Scalar>(model: &LabelPromptModel<S>, layer: Option<usize>) -> Result<usize, AnalysisError> {
    let n_layers = model.config.encoder.n_layers;
    match layer {
        None if n_layers > 0 => Ok(n_layers - 1),
        Some(l) if l < n_layers => Ok(l),
        _ => Err(AnalysisError::Layer { layer: layer.unwrap_or(0), n_layers }),
    }
}

/// Extracts the activated sequences of `instance` at `layer` (default: last).
pub fn activated_sequences<S: Scalar>(
    model: &LabelPromptModel<S>,
    instance: &Instance,
    layer: Option<usize>,
) -> Result<PromptActivations<S>, AnalysisError> {
    let layer = resolve_layer(model, layer)?;
    let enc = model.prompt(instance)?;
    let out = encode(&enc, &model.encoder, &model.store).map_err(ModelError::from)?;
    let acts = &out.ffn_activations[layer];
    let row = |p: usize| ActivatedSequence::new(acts.row_slice(p).to_vec());
    Ok(PromptActivations {
        gold: enc.gold,
        labels: enc.label_positions.iter().map(|&p| row(p)).collect(),
        mask: row(enc.mask_pos),
    })
}

/// `ON(s_{c_j}, s_M)` for every label slot `j` of one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceOn {
    pub gold: usize,
    pub on: Vec<f64>,
}

pub fn instance_on_rates<S: Scalar>(
    model: &LabelPromptModel<S>,
    instances: &[Instance],
    layer: Option<usize>,
) -> Result<Vec<InstanceOn>, AnalysisError> {
    instances
        .par_iter()
        .map(|inst| {
            let acts = activated_sequences(model, inst, layer)?;
            let on = acts.labels.iter().map(|l| on_rate(l, &acts.mask)).collect::<Result<_, _>>()?;
            Ok(InstanceOn { gold: acts.gold, on })
        })
        .collect()
}

/// Mean overlap `r(i, j)` between label slot `j` and `[MASK]` over
/// instances whose gold relation is `i`. Excluded relations are dropped
/// from both axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnMatrix {
    /// Names of the kept relations, in axis order.
    pub relations: Vec<String>,
    /// Original relation index of each kept axis entry.
    pub indices: Vec<usize>,
    /// `None` for rows with no instance.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Instances per kept gold relation.
    pub counts: Vec<usize>,
}

impl OnMatrix {
    /// Averages per-instance overlap rows.
    pub fn from_rates(rates: &[InstanceOn], relations: &[String], exclude: &[usize]) -> Self {
        let indices: Vec<usize> = (0..relations.len()).filter(|i| !exclude.contains(i)).collect();
        let k = indices.len();
        let mut sums = vec![vec![0.0f64; k]; k];
        let mut counts = vec![0usize; k];
        for r in rates {
            let Some(row) = indices.iter().position(|&i| i == r.gold) else { continue };
            counts[row] += 1;
            for (col, &j) in indices.iter().enumerate() {
                sums[row][col] += r.on[j];
            }
        }
        let cells = sums
            .into_iter()
            .zip(&counts)
            .map(|(row, &c)| row.into_iter().map(|s| (c > 0).then(|| s / c as f64)).collect())
            .collect();
        Self { relations: indices.iter().map(|&i| relations[i].clone()).collect(), indices, cells, counts }
    }

    /// `mean_i [r(i,i) − mean_{j≠i} r(i,j)]` over populated rows; `None`
    /// when no row is populated or the matrix is `1 × 1`.
    pub fn diagonal_dominance(&self) -> Option<f64> {
        let k = self.relations.len();
        if k < 2 {
            return None;
        }
        let gaps: Vec<f64> = self
            .cells
            .iter()
            .enumerate()
            .filter_map(|(i, row)| {
                let diag = row[i]?;
                let off: f64 = (0..k).filter(|&j| j != i).map(|j| row[j].unwrap_or(0.0)).sum::<f64>() / (k - 1) as f64;
                Some(diag - off)
            })
            .collect();
        (!gaps.is_empty()).then(|| gaps.iter().sum::<f64>() / gaps.len() as f64)
    }

    /// CSV with a header of relation names and one row per gold relation;
    /// absent rows have empty cells.
    pub fn write_csv(&self, path: &Path) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
        let mut header = vec!["gold_relation".to_string()];
        header.extend(self.relations.iter().cloned());
        w.write_record(&header).map_err(csv_err(path))?;
        for (name, row) in self.relations.iter().zip(&self.cells) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|c| c.map(|v| v.to_string()).unwrap_or_default()));
            w.write_record(&rec).map_err(csv_err(path))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// Sample counts keyed by relation name.
    pub fn counts_json(&self) -> serde_json::Value {
        let map: serde_json::Map<String, serde_json::Value> =
            self.relations.iter().zip(&self.counts).map(|(r, &c)| (r.clone(), c.into())).collect();
        serde_json::Value::Object(map)
    }

    /// Writes `path` and a `<stem>.counts.json` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<std::path::PathBuf, AnalysisError> {
        self.write_csv(path)?;
        let sidecar = path.with_extension("counts.json");
        let text = serde_json::to_string_pretty(&self.counts_json())
            .map_err(|source| AnalysisError::Json { path: sidecar.display().to_string(), source })?;
        std::fs::write(&sidecar, text).map_err(io_err(&sidecar))?;
        Ok(sidecar)
    }
}

pub fn on_matrix<S: Scalar>(
    model: &LabelPromptModel<S>,
    instances: &[Instance],
    exclude: &[usize],
    layer: Option<usize>,
) -> Result<(OnMatrix, Vec<InstanceOn>), AnalysisError> {
    let rates = instance_on_rates(model, instances, layer)?;
    let names: Vec<String> = model.vocab.relations().iter().map(|r| r.text.clone()).collect();
    Ok((OnMatrix::from_rates(&rates, &names, exclude), rates))
}

/// Writes per-instance overlap rows as JSON lines.
pub fn write_instance_rates(rates: &[InstanceOn], path: &Path) -> Result<(), AnalysisError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in rates {
        let line =
            serde_json::to_string(r).map_err(|source| AnalysisError::Json { path: path.display().to_string(), source })?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// CSV of `gold_relation, h0 … h{d-1}` with the final hidden vector at `[MASK]`.
pub fn export_mask_hiddens<S: Scalar>(
    model: &LabelPromptModel<S>,
    instances: &[Instance],
    path: &Path,
) -> Result<(), AnalysisError> {
    let rows: Vec<Vec<S>> =
        instances.par_iter().map(|inst| model.mask_hidden(inst)).collect::<Result<_, ModelError>>()?;
    let d = model.config.encoder.d_model;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = std::iter::once("gold_relation".to_string()).chain((0..d).map(|k| format!("h{k}"))).collect();
    w.write_record(&header).map_err(csv_err(path))?;
    for (inst, h) in instances.iter().zip(rows) {
        let rec: Vec<String> = std::iter::once(inst.relation.clone()).chain(h.iter().map(|v| v.to_string())).collect();
        w.write_record(&rec).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads a file written by [`export_mask_hiddens`].
pub fn read_mask_hiddens<S: Scalar + std::str::FromStr>(path: &Path) -> Result<Vec<(String, Vec<S>)>, AnalysisError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let mut fields = rec.iter();
        let gold = fields.next().unwrap_or_default().to_string();
        let h = fields
            .map(|f| {
                f.parse::<S>().map_err(|_| AnalysisError::Malformed {
                    path: path.display().to_string(),
                    row: row + 1,
                    message: format!("not a number: {f:?}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        out.push((gold, h));
    }
    Ok(out)
}

/// FFN inputs of one layer for one prompt, kept in `f64` for dumping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfnInputDump {
    pub layer: usize,
    pub rows: Vec<Vec<f64>>,
}

pub fn dump_ffn_inputs<S: Scalar>(
    model: &LabelPromptModel<S>,
    instance: &Instance,
    layer: Option<usize>,
) -> Result<FfnInputDump, AnalysisError> {
    let layer = resolve_layer(model, layer)?;
    let enc = model.prompt(instance)?;
    let out = encode(&enc, &model.encoder, &model.store).map_err(ModelError::from)?;
    let x = &out.ffn_inputs[layer];
    Ok(FfnInputDump { layer, rows: (0..x.rows()).map(|r| x.row_slice(r).iter().map(|v| v.as_f64()).collect()).collect() })
}

/// `GELU(x·W₁ + b₁)` recomputed with plain loops from dumped FFN inputs.
pub fn recompute_activations<S: Scalar>(
    model: &LabelPromptModel<S>,
    dump: &FfnInputDump,
) -> Result<Vec<ActivatedSequence<S>>, AnalysisError> {
    let n_layers = model.encoder.layers.len();
    let lp = model.encoder.layers.get(dump.layer).ok_or(AnalysisError::Layer { layer: dump.layer, n_layers })?;
    let w1: &Tensor<S> = model.store.get(lp.ffn_in);
    let b1: &Tensor<S> = model.store.get(lp.ffn_in_bias);
    let (d, d_ff) = (w1.rows(), w1.cols());
    dump.rows
        .iter()
        .map(|x| {
            if x.len() != d {
                return Err(AnalysisError::Length(x.len(), d));
            }
            let values = (0..d_ff)
                .map(|j| {
                    let mut acc = S::zero();
                    for (k, &xk) in x.iter().enumerate() {
                        acc += S::lit(xk) * w1.get(k, j);
                    }
                    gelu(acc + b1.get(0, j))
                })
                .collect();
            Ok(ActivatedSequence::new(values))
        })
        .collect()
}
