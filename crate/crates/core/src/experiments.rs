//! Monte-Carlo accuracy studies.
//!
//! Iteration `i` of any Monte-Carlo loop draws from stream `i` of the run
//! seed and results are reduced in iteration order, so every number here is
//! independent of how rayon schedules the work.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::imperfect::{
    apply_instance, realize_instance, realize_instance_with, stream_rng, ImperfectionInstance,
    ImperfectionParameterSet, MapKind, QuantMode, QuantizerSpec,
};
use crate::linalg::ComplexMatrix;
use crate::mesh::{clements_decompose, mesh_to_unitary, rvd, GridSlot};
use crate::network::{accuracy_compiled, evaluate_accuracy, CompiledModel, Dataset, IpnnModel};

/// Default instances per parameter set.
pub const DEFAULT_N_P: usize = 10;

/// Correct predictions of a compiled model.
fn correct_count(model: &CompiledModel, data: &Dataset) -> Result<usize> {
    Ok((accuracy_compiled(model, data)? * data.len() as f64).round() as usize)
}

/// SHA-256 of the model's parameters, hex encoded.
pub fn model_hash(model: &IpnnModel) -> String {
    let text = serde_json::to_string(model).expect("model serialises");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Accuracy statistics of one parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub p: ImperfectionParameterSet,
    pub n_p: usize,
    pub seed: u64,
    pub nominal_accuracy: f64,
    pub per_run_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// `nominal_accuracy − mean_accuracy`.
    pub sal: f64,
}

/// Runs `n` perturbed evaluations; `instance(i)` realises iteration `i`.
fn monte_carlo<F>(model: &IpnnModel, data: &Dataset, n: usize, instance: F) -> Result<Vec<usize>>
where
    F: Fn(u64) -> Result<ImperfectionInstance> + Sync,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let moved = apply_instance(model, &instance(i)?)?;
            correct_count(&moved.compile(), data)
        })
        .collect()
}

fn summarise(
    p: ImperfectionParameterSet,
    seed: u64,
    nominal_correct: usize,
    counts: &[usize],
    total: usize,
) -> MonteCarloReport {
    let n = counts.len();
    let per_run: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    // integer sums keep SAL exactly zero when every run matches nominal
    let sum: usize = counts.iter().sum();
    let mean = sum as f64 / (n * total) as f64;
    let nominal = nominal_correct as f64 / total as f64;
    let std = if n > 1 {
        (per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    MonteCarloReport {
        p,
        n_p: n,
        seed,
        nominal_accuracy: nominal,
        per_run_accuracy: per_run,
        mean_accuracy: mean,
        std_accuracy: std,
        sal: nominal - mean,
    }
}

fn check_runs(n: usize, data: &Dataset) -> Result<()> {
    if n == 0 {
        return Err(invalid("at least one Monte-Carlo iteration is required"));
    }
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    Ok(())
}

/// Mean accuracy over `n_p` instances of `p` and the resulting accuracy loss.
pub fn simulated_accuracy_loss(
    model: &IpnnModel,
    data: &Dataset,
    p: &ImperfectionParameterSet,
    n_p: usize,
    seed: u64,
) -> Result<MonteCarloReport> {
    check_runs(n_p, data)?;
    p.validate()?;
    let shape = model.mesh_sizes();
    let nominal = correct_count(&model.compile(), data)?;
    let counts = monte_carlo(model, data, n_p, |i| realize_instance(p, &shape, seed, i))?;
    Ok(summarise(p.clone(), seed, nominal, &counts, data.len()))
}

/// The five single-parameter sets summed by the aggregated accuracy loss.
///
/// Correlation length and precision of an inactive term fall back to 1 and
/// full precision; the radial flag, renormalisation and quantiser mode carry
/// over. The mean insertion loss travels with `sigma_il`.
pub fn standalone_sets(p: &ImperfectionParameterSet) -> [ImperfectionParameterSet; 5] {
    let base = ImperfectionParameterSet {
        radial: p.radial,
        renormalize: p.renormalize,
        quant_mode: p.quant_mode,
        ..ImperfectionParameterSet::zero()
    };
    [
        ImperfectionParameterSet {
            sigma_phs: p.sigma_phs,
            ..base.clone()
        },
        ImperfectionParameterSet {
            sigma_bes: p.sigma_bes,
            ..base.clone()
        },
        ImperfectionParameterSet {
            corr_len: p.corr_len,
            ..base.clone()
        },
        ImperfectionParameterSet {
            sigma_il: p.sigma_il,
            mu_il: p.mu_il,
            ..base.clone()
        },
        ImperfectionParameterSet {
            n_bits: p.n_bits,
            ..base
        },
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AalReport {
    pub aal: f64,
    pub terms: Vec<MonteCarloReport>,
}

/// Sum of the standalone accuracy losses of each parameter of `p`.
pub fn aggregated_accuracy_loss(
    model: &IpnnModel,
    data: &Dataset,
    p: &ImperfectionParameterSet,
    n_p: usize,
    seed: u64,
) -> Result<AalReport> {
    let terms = standalone_sets(p)
        .iter()
        .map(|q| simulated_accuracy_loss(model, data, q, n_p, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(AalReport {
        aal: terms.iter().map(|t| t.sal).sum(),
        terms,
    })
}

/// A sweep coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AxisValue {
    Num(f64),
    Text(String),
}

impl std::fmt::Display for AxisValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AxisValue::Num(v) => write!(f, "{v}"),
            AxisValue::Text(s) => f.write_str(s),
        }
    }
}

impl From<f64> for AxisValue {
    fn from(v: f64) -> Self {
        AxisValue::Num(v)
    }
}

impl From<&str> for AxisValue {
    fn from(s: &str) -> Self {
        AxisValue::Text(s.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axes: Vec<AxisValue>,
    pub mean: f64,
    pub std: f64,
    pub n_mc: usize,
    pub seed: u64,
}

/// One table of results plus what produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub experiment: String,
    pub axis_names: Vec<String>,
    pub rows: Vec<SweepRow>,
    pub metadata: BTreeMap<String, Value>,
}

impl SweepResult {
    fn new(experiment: &str, axis_names: &[&str], model: &IpnnModel, nominal: f64, seed: u64) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("model_hash".into(), Value::from(model_hash(model)));
        metadata.insert("nominal_accuracy".into(), Value::from(nominal));
        metadata.insert("seed".into(), Value::from(seed));
        Self {
            experiment: experiment.into(),
            axis_names: axis_names.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            metadata,
        }
    }

    /// Header `axis…,mean,std,n_mc,seed`, one line per row.
    pub fn to_csv(&self) -> String {
        let mut out = self.axis_names.join(",");
        out.push_str(if self.axis_names.is_empty() { "" } else { "," });
        out.push_str("mean,std,n_mc,seed\n");
        for r in &self.rows {
            for a in &r.axes {
                let _ = write!(out, "{a},");
            }
            let _ = writeln!(out, "{},{},{},{}", r.mean, r.std, r.n_mc, r.seed);
        }
        out
    }

    /// Column of means.
    pub fn means(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean).collect()
    }

    pub fn nominal_accuracy(&self) -> f64 {
        self.metadata["nominal_accuracy"].as_f64().unwrap_or(f64::NAN)
    }
}

/// Which uncertainties a sigma sweep drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    Phs,
    Bes,
    Both,
}

impl SigmaMode {
    pub fn apply(self, sigma: f64, p: &mut ImperfectionParameterSet) {
        let (phs, bes) = match self {
            SigmaMode::Phs => (sigma, 0.0),
            SigmaMode::Bes => (0.0, sigma),
            SigmaMode::Both => (sigma, sigma),
        };
        p.sigma_phs = phs;
        p.sigma_bes = bes;
    }

    fn name(self) -> &'static str {
        match self {
            SigmaMode::Phs => "phs",
            SigmaMode::Bes => "bes",
            SigmaMode::Both => "both",
        }
    }
}

/// Uniform uncorrelated uncertainties across every MZI.
pub fn run_exp1(
    model: &IpnnModel,
    data: &Dataset,
    sigmas: &[f64],
    mode: SigmaMode,
    n_mc: usize,
    seed: u64,
) -> Result<SweepResult> {
    let mut r = run_exp3(model, data, sigmas, &[1], false, mode, n_mc, seed)?;
    r.experiment = "exp1".into();
    Ok(r)
}

/// Spatially correlated uncertainties: one block of rows per correlation length.
#[allow(clippy::too_many_arguments)]
pub fn run_exp3(
    model: &IpnnModel,
    data: &Dataset,
    sigmas: &[f64],
    corr_lens: &[u32],
    radial: bool,
    mode: SigmaMode,
    n_mc: usize,
    seed: u64,
) -> Result<SweepResult> {
    check_runs(n_mc, data)?;
    let nominal = evaluate_accuracy(model, data)?;
    let mut out = SweepResult::new("exp3", &["L", "sigma"], model, nominal, seed);
    out.metadata.insert("radial".into(), Value::from(radial));
    out.metadata.insert("mode".into(), Value::from(mode.name()));
    for &l in corr_lens {
        for &sigma in sigmas {
            let mut p = ImperfectionParameterSet {
                corr_len: l,
                radial,
                ..Default::default()
            };
            mode.apply(sigma, &mut p);
            let rep = simulated_accuracy_loss(model, data, &p, n_mc, seed)?;
            out.rows.push(SweepRow {
                axes: vec![(l as f64).into(), sigma.into()],
                mean: rep.mean_accuracy,
                std: rep.std_accuracy,
                n_mc,
                seed,
            });
        }
    }
    Ok(out)
}

/// Mean accuracy loss per 2×2-MZI region of one mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub mesh: usize,
    pub n: usize,
    /// Regions along the layer axis.
    pub cols: usize,
    /// Regions along the mode axis.
    pub rows: usize,
    /// Row-major accuracy loss per region.
    pub loss: Vec<f64>,
    /// Standard error of each cell's mean.
    pub std_err: Vec<f64>,
    /// Some regions hold fewer than four MZIs.
    pub partial: bool,
}

impl Heatmap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.loss[row * self.cols + col]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.loss.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    /// Grid of squares coloured by [`RAMP`] from the smallest to the largest
    /// cell value, split into ten equal bins.
    pub fn to_svg(&self) -> String {
        const CELL: usize = 40;
        let lo = self.loss.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.loss.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut out = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\">\n",
            self.cols * CELL,
            self.rows * CELL
        );
        for r in 0..self.rows {
            for c in 0..self.cols {
                let v = self.get(r, c);
                let bin = if hi > lo {
                    (((v - lo) / (hi - lo)) * 10.0).floor().min(9.0) as usize
                } else {
                    0
                };
                let _ = writeln!(
                    out,
                    "  <rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\"><title>{v}</title></rect>",
                    c * CELL,
                    r * CELL,
                    RAMP[bin]
                );
            }
        }
        out.push_str("</svg>\n");
        out
    }
}

/// Ten-step colour ramp, dark purple (low) to yellow (high).
pub const RAMP: [&str; 10] = [
    "#440154", "#482878", "#3e4989", "#31688e", "#26828e", "#1f9e89", "#35b779", "#6ece58", "#b5de2b", "#fde725",
];

/// Region of an MZI: `(layer / 2, (top_mode / 2) / 2)` as (column, row).
pub fn region_of(slot: &GridSlot) -> (usize, usize) {
    (slot.layer / 2, slot.top_mode / 2 / 2)
}

/// Region grid `(cols, rows)` for an `n`-mode mesh.
pub fn region_grid(n: usize) -> (usize, usize) {
    let per_layer = n.saturating_sub(1).div_ceil(2);
    (n.div_ceil(2), per_layer.div_ceil(2))
}

/// Raised uncertainty in one region at a time, lower elsewhere, across all
/// meshes. Phase and splitter sigmas are equal. All regions share the same
/// underlying noise.
pub fn run_exp2(
    model: &IpnnModel,
    data: &Dataset,
    sigma_in: f64,
    sigma_out: f64,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<Heatmap>> {
    check_runs(n_mc, data)?;
    let shape = model.mesh_sizes();
    let nominal = correct_count(&model.compile(), data)?;
    let total = data.len();
    let p = ImperfectionParameterSet::zero();
    let mut maps = Vec::new();
    for (mi, &n) in shape.iter().enumerate() {
        let (cols, rows) = region_grid(n);
        let per_layer = n.saturating_sub(1).div_ceil(2);
        let mut loss = Vec::with_capacity(cols * rows);
        let mut std_err = Vec::with_capacity(cols * rows);
        for row in 0..rows {
            for col in 0..cols {
                let counts = monte_carlo(model, data, n_mc, |i| {
                    realize_instance_with(&p, &shape, seed, i, |m, slot| {
                        let s = if m == mi && region_of(slot) == (col, row) {
                            sigma_in
                        } else {
                            sigma_out
                        };
                        (s, s)
                    })
                })?;
                let rep = summarise(p.clone(), seed, nominal, &counts, total);
                loss.push(rep.sal);
                std_err.push(rep.std_accuracy / (n_mc as f64).sqrt());
            }
        }
        maps.push(Heatmap {
            mesh: mi,
            n,
            cols,
            rows,
            loss,
            std_err,
            partial: n % 2 == 1 || per_layer % 2 == 1,
        });
    }
    Ok(maps)
}

/// Average RVD when only one MZI is perturbed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MziSensitivity {
    pub layer: usize,
    pub top_mode: usize,
    pub mean_rvd: f64,
}

/// Perturbs each MZI of the decomposed `u` in turn (all six parameters,
/// i.i.d. Gaussian) and averages the RVD against the nominal mesh.
pub fn per_mzi_rvd(
    u: &ComplexMatrix,
    sigma_phs: f64,
    sigma_bes: f64,
    n_mc: usize,
    seed: u64,
) -> Result<Vec<MziSensitivity>> {
    if n_mc == 0 {
        return Err(invalid("at least one Monte-Carlo iteration is required"));
    }
    let plan = clements_decompose(u, 1e-8)?;
    let nominal = mesh_to_unitary(&plan);
    let sp = MapKind::Phase.cell_std(sigma_phs);
    let sb = MapKind::Splitter.cell_std(sigma_bes);
    (0..plan.nodes.len())
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, k as u64);
            let mut total = 0.0;
            for _ in 0..n_mc {
                let z: [f64; 6] = std::array::from_fn(|_| rng.sample(StandardNormal));
                let mut moved = plan.clone();
                let node = &mut moved.nodes[k];
                node.phases.theta += sp * z[0];
                node.phases.phi += sp * z[1];
                node.splitters = node.splitters.perturbed(sb * z[2], sb * z[3], sb * z[4], sb * z[5]);
                total += rvd(&mesh_to_unitary(&moved), &nominal)?;
            }
            Ok(MziSensitivity {
                layer: plan.nodes[k].layer,
                top_mode: plan.nodes[k].top_mode,
                mean_rvd: total / n_mc as f64,
            })
        })
        .collect()
}

/// Layers an experiment acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelector {
    All,
    /// A single network layer (both of its meshes).
    Layer(usize),
}

impl LayerSelector {
    fn covers_mesh(self, mesh: usize) -> bool {
        match self {
            LayerSelector::All => true,
            LayerSelector::Layer(l) => mesh / 2 == l,
        }
    }

    fn check(self, model: &IpnnModel) -> Result<()> {
        match self {
            LayerSelector::Layer(l) if l >= model.layers.len() => Err(invalid(format!(
                "layer {l} does not exist in a {}-layer model",
                model.layers.len()
            ))),
            _ => Ok(()),
        }
    }

    fn label(self) -> String {
        match self {
            LayerSelector::All => "all".into(),
            LayerSelector::Layer(l) => format!("L{l}"),
        }
    }
}

/// Insertion loss sampled per MZI in the selected layers only.
#[allow(clippy::too_many_arguments)]
pub fn run_loss_sweep(
    model: &IpnnModel,
    data: &Dataset,
    mus: &[f64],
    sigmas: &[f64],
    selector: LayerSelector,
    n_mc: usize,
    seed: u64,
) -> Result<SweepResult> {
    check_runs(n_mc, data)?;
    selector.check(model)?;
    let shape = model.mesh_sizes();
    let nominal = correct_count(&model.compile(), data)?;
    let mut out = SweepResult::new(
        "loss",
        &["mu_il", "sigma_il"],
        model,
        nominal as f64 / data.len() as f64,
        seed,
    );
    out.metadata.insert("layers".into(), Value::from(selector.label()));
    for &mu in mus {
        for &sigma in sigmas {
            let p = ImperfectionParameterSet {
                mu_il: mu,
                sigma_il: sigma,
                ..Default::default()
            };
            p.validate()?;
            let counts = monte_carlo(model, data, n_mc, |i| {
                let mut inst = realize_instance(&p, &shape, seed, i)?;
                for (m, dev) in inst.meshes.iter_mut().enumerate() {
                    if !selector.covers_mesh(m) {
                        dev.nodes.iter_mut().for_each(|d| d.il_db = 0.0);
                    }
                }
                Ok(inst)
            })?;
            let rep = summarise(p, seed, nominal, &counts, data.len());
            out.rows.push(SweepRow {
                axes: vec![mu.into(), sigma.into()],
                mean: rep.mean_accuracy,
                std: rep.std_accuracy,
                n_mc,
                seed,
            });
        }
    }
    Ok(out)
}

/// Precision used for layers outside the selection in a quantisation sweep.
pub const BACKGROUND_BITS: u32 = 8;

fn mode_name(m: QuantMode) -> &'static str {
    match m {
        QuantMode::Evs => "EVS",
        QuantMode::Eps => "EPS",
        QuantMode::Kc => "KC",
    }
}

/// Accuracy under each quantiser and precision. Unselected layers use the
/// same mode at [`BACKGROUND_BITS`].
pub fn run_quant_sweep(
    model: &IpnnModel,
    data: &Dataset,
    modes: &[QuantMode],
    bits: &[u32],
    selector: LayerSelector,
) -> Result<SweepResult> {
    selector.check(model)?;
    let nominal = evaluate_accuracy(model, data)?;
    let mut out = SweepResult::new("quant", &["mode", "n_bits"], model, nominal, 0);
    out.metadata.insert("layers".into(), Value::from(selector.label()));
    let shape = model.mesh_sizes();
    let jobs: Vec<(QuantMode, u32)> = modes.iter().flat_map(|&m| bits.iter().map(move |&b| (m, b))).collect();
    let accs = jobs
        .par_iter()
        .map(|&(mode, b)| {
            let mut inst = ImperfectionInstance::zero(&shape);
            for (m, dev) in inst.meshes.iter_mut().enumerate() {
                let n_bits = if selector.covers_mesh(m) { b } else { BACKGROUND_BITS };
                dev.quantizer = Some(QuantizerSpec::new(mode, n_bits)?);
            }
            evaluate_accuracy(&apply_instance(model, &inst)?, data)
        })
        .collect::<Result<Vec<_>>>()?;
    for (&(mode, b), acc) in jobs.iter().zip(accs) {
        out.rows.push(SweepRow {
            axes: vec![mode_name(mode).into(), (b as f64).into()],
            mean: acc,
            std: 0.0,
            n_mc: 1,
            seed: 0,
        });
    }
    Ok(out)
}

/// Candidate values for each imperfection parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PstarGrid {
    pub sigma_phs: Vec<f64>,
    pub sigma_bes: Vec<f64>,
    pub corr_len: Vec<u32>,
    pub sigma_il: Vec<f64>,
    /// `null` stands for full precision.
    pub n_bits: Vec<Option<u32>>,
}

impl PstarGrid {
    fn points(&self, template: &ImperfectionParameterSet) -> Vec<ImperfectionParameterSet> {
        let mut out = Vec::new();
        for &a in &self.sigma_phs {
            for &b in &self.sigma_bes {
                for &l in &self.corr_len {
                    for &il in &self.sigma_il {
                        for &nb in &self.n_bits {
                            out.push(ImperfectionParameterSet {
                                sigma_phs: a,
                                sigma_bes: b,
                                corr_len: l,
                                sigma_il: il,
                                n_bits: nb,
                                ..template.clone()
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Coordinates in which larger means more imperfect.
fn severity(p: &ImperfectionParameterSet) -> [f64; 5] {
    [
        p.sigma_phs,
        p.sigma_bes,
        p.corr_len as f64,
        p.sigma_il,
        p.n_bits.map_or(0.0, |b| 1.0 / b as f64),
    ]
}

/// `a` is at least as imperfect as `b` everywhere and strictly somewhere.
pub fn dominates(a: &ImperfectionParameterSet, b: &ImperfectionParameterSet) -> bool {
    let (sa, sb) = (severity(a), severity(b));
    sa.iter().zip(&sb).all(|(x, y)| x >= y) && sa.iter().zip(&sb).any(|(x, y)| x > y)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PstarPoint {
    pub p: ImperfectionParameterSet,
    pub sal: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PstarResult {
    pub alpha_max: f64,
    pub evaluated: Vec<PstarPoint>,
    /// Feasible points no other feasible point dominates.
    pub pareto: Vec<PstarPoint>,
}

/// Exhaustive lattice search for the maximal imperfection sets whose accuracy
/// loss stays within `alpha_max`. `template` supplies the non-lattice fields.
pub fn search_pstar(
    model: &IpnnModel,
    data: &Dataset,
    grid: &PstarGrid,
    template: &ImperfectionParameterSet,
    alpha_max: f64,
    n_p: usize,
    seed: u64,
) -> Result<PstarResult> {
    if grid.sigma_phs.is_empty()
        || grid.sigma_bes.is_empty()
        || grid.corr_len.is_empty()
        || grid.sigma_il.is_empty()
        || grid.n_bits.is_empty()
    {
        return Err(invalid("every P* grid axis needs at least one value"));
    }
    if !(0.0..=1.0).contains(&alpha_max) {
        return Err(invalid(format!("alpha_max must lie in [0, 1], got {alpha_max}")));
    }
    let evaluated = grid
        .points(template)
        .into_iter()
        .map(|p| {
            let sal = simulated_accuracy_loss(model, data, &p, n_p, seed)?.sal;
            Ok(PstarPoint { p, sal })
        })
        .collect::<Result<Vec<_>>>()?;
    let feasible: Vec<&PstarPoint> = evaluated.iter().filter(|e| e.sal <= alpha_max).collect();
    let pareto = feasible
        .iter()
        .filter(|a| !feasible.iter().any(|b| dominates(&b.p, &a.p)))
        .map(|a| (*a).clone())
        .collect();
    Ok(PstarResult {
        alpha_max,
        evaluated,
        pareto,
    })
}
