//! Hardware imperfections: spatial variation maps, insertion loss, phase
//! quantisation, and their realisation on a model.
//!
//! Each mesh of `n` modes is laid over an `(n − 1) × 2n` grid of unit
//! cells (see [`crate::mesh::grid_layout`]). Of the two cells under an MZI the
//! left one perturbs the input side (`φ`, first coupler) and the right one the
//! internal side (`θ`, second coupler).

use std::f64::consts::{SQRT_2, TAU};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::device::{wrap_phase, ArmLoss, PhaseShifterSpec};
use crate::error::{invalid, Error, Result};
use crate::mesh::{grid_layout, GridShape, GridSlot, MeshPlan};
use crate::network::IpnnModel;

/// Which physical quantity a map perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    /// Values in radians with std `2π·σ`.
    Phase,
    /// Amplitude deltas with std `σ/√2`.
    Splitter,
}

impl MapKind {
    /// Per-cell standard deviation for a dimensionless `sigma`.
    pub fn cell_std(self, sigma: f64) -> f64 {
        match self {
            MapKind::Phase => TAU * sigma,
            MapKind::Splitter => sigma / SQRT_2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MapKind::Phase => "phase",
            MapKind::Splitter => "splitter",
        }
    }
}

/// Spatial structure of a map, independent of its amplitude.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapStructure {
    pub radial: bool,
    /// Correlation length in grid units; 1 means uncorrelated.
    pub corr_len: u32,
    /// Rescale after smoothing so the map keeps its pre-convolution RMS.
    pub renormalize: bool,
}

impl MapStructure {
    pub const UNCORRELATED: Self = Self {
        radial: false,
        corr_len: 1,
        renormalize: true,
    };
}

/// Per-cell deviations on a placement grid, stored row-major (`y` rows of
/// `width` cells).
#[derive(Clone, Debug, PartialEq)]
pub struct VariationMap {
    pub width: usize,
    pub height: usize,
    pub sigma: f64,
    pub kind: MapKind,
    pub structure: MapStructure,
    pub values: Vec<f64>,
}

impl VariationMap {
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Root mean square about zero.
    pub fn rms(&self) -> f64 {
        rms(&self.values)
    }

    /// Metadata line followed by one CSV row per grid row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("width,height,sigma,kind,radial,L\n");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            self.width,
            self.height,
            self.sigma,
            self.kind.name(),
            self.structure.radial,
            self.structure.corr_len
        );
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Std multiplier of a radial map: distance from the grid centre over the
/// centre-to-corner distance.
pub fn radial_weight(x: usize, y: usize, width: usize, height: usize) -> f64 {
    let cx = (width as f64 - 1.0) / 2.0;
    let cy = (height as f64 - 1.0) / 2.0;
    let d_max = (cx * cx + cy * cy).sqrt();
    if d_max == 0.0 {
        return 0.0;
    }
    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
    (dx * dx + dy * dy).sqrt() / d_max
}

/// Smoothing kernel `2/(√π·L) · exp(−(2·dx² + dy²)/L²)`.
pub fn kernel_value(dx: f64, dy: f64, corr_len: f64) -> f64 {
    2.0 / (std::f64::consts::PI.sqrt() * corr_len) * (-(2.0 * dx * dx + dy * dy) / (corr_len * corr_len)).exp()
}

/// Same-size convolution with the separable kernel, zero outside the grid.
fn smooth(values: &[f64], width: usize, height: usize, corr_len: f64) -> Vec<f64> {
    let l2 = corr_len * corr_len;
    let kx: Vec<f64> = (0..width).map(|d| (-2.0 * (d * d) as f64 / l2).exp()).collect();
    let ky: Vec<f64> = (0..height).map(|d| (-((d * d) as f64) / l2).exp()).collect();
    let norm = 2.0 / (std::f64::consts::PI.sqrt() * corr_len);
    let mut rows = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            rows[y * width + x] = (0..width).map(|xs| kx[x.abs_diff(xs)] * values[y * width + xs]).sum();
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = norm
                * (0..height)
                    .map(|ys| ky[y.abs_diff(ys)] * rows[ys * width + x])
                    .sum::<f64>();
        }
    }
    out
}

/// Unit-amplitude map: i.i.d. standard normal cells, optionally radially
/// weighted and smoothed. Scaling by [`MapKind::cell_std`] gives a physical map.
pub fn unit_variation_map<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    structure: MapStructure,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if width == 0 || height == 0 {
        return Err(invalid(format!(
            "map dimensions must be positive, got {width}x{height}"
        )));
    }
    if structure.corr_len == 0 {
        return Err(invalid("correlation length must be at least 1"));
    }
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let z: f64 = rng.sample(StandardNormal);
            let w = if structure.radial {
                radial_weight(x, y, width, height)
            } else {
                1.0
            };
            v.push(z * w);
        }
    }
    if structure.corr_len > 1 {
        let target = rms(&v);
        let mut u = smooth(&v, width, height, structure.corr_len as f64);
        if structure.renormalize {
            let got = rms(&u);
            if got > 0.0 {
                let k = target / got;
                u.iter_mut().for_each(|x| *x *= k);
            }
        }
        v = u;
    }
    Ok(v)
}

/// Draws one variation map.
pub fn generate_variation_map<R: Rng + ?Sized>(
    width: usize,
    height: usize,
    sigma: f64,
    kind: MapKind,
    structure: MapStructure,
    rng: &mut R,
) -> Result<VariationMap> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be finite and non-negative, got {sigma}")));
    }
    let scale = kind.cell_std(sigma);
    let values = unit_variation_map(width, height, structure, rng)?
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Ok(VariationMap {
        width,
        height,
        sigma,
        kind,
        structure,
        values,
    })
}

/// Amplitude factor per arm for an MZI insertion loss in dB (`IL = 10·log₁₀ β⁴`).
pub fn insertion_loss_to_beta(il_db: f64) -> f64 {
    10f64.powf(-il_db / 40.0)
}

/// How tuned phases are encoded.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum QuantMode {
    /// Equidistant heater voltages over `[0, v_max]`.
    #[default]
    Evs,
    /// Equidistant phases over `[0, 2π]`.
    Eps,
    /// k-means over the phase population, snapping to cluster medians.
    Kc,
}

/// Largest supported precision.
pub const MAX_BITS: u32 = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSpec {
    pub mode: QuantMode,
    pub n_bits: u32,
    #[serde(default)]
    pub phase_spec: PhaseShifterSpec,
    /// Fixed KC representatives; computed from the phase population when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kc_levels: Option<Vec<f64>>,
}

impl QuantizerSpec {
    pub fn new(mode: QuantMode, n_bits: u32) -> Result<Self> {
        let spec = Self {
            mode,
            n_bits,
            phase_spec: PhaseShifterSpec::default(),
            kc_levels: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_BITS).contains(&self.n_bits) {
            return Err(invalid(format!(
                "n_bits must be in 1..={MAX_BITS}, got {}",
                self.n_bits
            )));
        }
        if let Some(levels) = &self.kc_levels {
            if levels.is_empty() || levels.len() > self.level_count() {
                return Err(invalid("KC levels must be non-empty and at most 2^n_bits"));
            }
            if levels.iter().any(|l| !(0.0..=TAU).contains(l)) {
                return Err(invalid("KC levels must lie in [0, 2π]"));
            }
        }
        Ok(())
    }

    pub fn level_count(&self) -> usize {
        1usize << self.n_bits
    }
}

const PHASE_SLACK: f64 = 1e-12;

fn check_phase_range(phases: &[f64]) -> Result<()> {
    if let Some(&p) = phases
        .iter()
        .find(|p| !(**p >= -PHASE_SLACK && **p <= TAU + PHASE_SLACK))
    {
        return Err(Error::OutOfRange {
            what: "phase",
            value: p,
            min: 0.0,
            max: TAU,
        });
    }
    Ok(())
}

/// Nearest integer with exact halves going down.
fn round_half_down(x: f64) -> f64 {
    (x - 0.5).ceil()
}

/// 1-D k-means result: cluster centres in ascending order and the median of
/// each cluster's members.
#[derive(Clone, Debug, PartialEq)]
pub struct KcTable {
    pub centers: Vec<f64>,
    pub medians: Vec<f64>,
}

impl KcTable {
    fn nearest(&self, x: f64) -> usize {
        let i = self.centers.partition_point(|c| *c < x);
        if i == 0 {
            0
        } else if i == self.centers.len() || x - self.centers[i - 1] <= self.centers[i] - x {
            i - 1
        } else {
            i
        }
    }

    pub fn snap(&self, x: f64) -> f64 {
        self.medians[self.nearest(x)]
    }
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-9;

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Lloyd's algorithm on the real line with quantile initialisation.
pub fn kmeans_1d(values: &[f64], k: usize) -> Result<KcTable> {
    if values.is_empty() || k == 0 {
        return Err(invalid("k-means needs values and at least one cluster"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() <= k {
        return Ok(KcTable {
            centers: distinct.clone(),
            medians: distinct,
        });
    }
    let n = sorted.len();
    let mut centers: Vec<f64> = (0..k)
        .map(|i| sorted[(((i as f64 + 0.5) / k as f64) * n as f64) as usize])
        .collect();
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for _ in 0..KMEANS_MAX_ITER {
        centers.sort_by(f64::total_cmp);
        let table = KcTable {
            centers: centers.clone(),
            medians: Vec::new(),
        };
        members.iter_mut().for_each(Vec::clear);
        for &x in &sorted {
            members[table.nearest(x)].push(x);
        }
        let mut shift: f64 = 0.0;
        for i in 0..k {
            if members[i].is_empty() {
                let largest = (0..k).max_by_key(|&j| members[j].len()).unwrap();
                let reseed = median_sorted(&members[largest]);
                shift = shift.max((centers[i] - reseed).abs());
                centers[i] = reseed;
            } else {
                let mean = members[i].iter().sum::<f64>() / members[i].len() as f64;
                shift = shift.max((centers[i] - mean).abs());
                centers[i] = mean;
            }
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    centers.sort_by(f64::total_cmp);
    let table = KcTable {
        centers: centers.clone(),
        medians: Vec::new(),
    };
    members.iter_mut().for_each(Vec::clear);
    for &x in &sorted {
        members[table.nearest(x)].push(x);
    }
    let medians = members
        .iter()
        .zip(&centers)
        .map(|(m, &c)| if m.is_empty() { c } else { median_sorted(m) })
        .collect();
    Ok(KcTable { centers, medians })
}

/// Snaps phases in `[0, 2π]` to the levels of `spec`. KC without fixed levels
/// clusters the given phases themselves.
pub fn quantize_phases(phases: &[f64], spec: &QuantizerSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    check_phase_range(phases)?;
    let table = match (spec.mode, &spec.kc_levels) {
        (QuantMode::Kc, None) if !phases.is_empty() => Some(kmeans_1d(phases, spec.level_count())?),
        _ => None,
    };
    Ok(phases.iter().map(|&p| snap_one(p, spec, table.as_ref())).collect())
}

fn snap_one(p: f64, spec: &QuantizerSpec, table: Option<&KcTable>) -> f64 {
    let p = p.clamp(0.0, TAU);
    let top = (spec.level_count() - 1) as f64;
    match spec.mode {
        QuantMode::Evs => {
            let ps = &spec.phase_spec;
            let step = ps.v_max / top;
            let v = (p / ps.k).sqrt();
            let idx = round_half_down(v / step).clamp(0.0, top);
            let vq = idx * step;
            ps.k * vq * vq
        }
        QuantMode::Eps => {
            let step = TAU / top;
            round_half_down(p / step).clamp(0.0, top) * step
        }
        QuantMode::Kc => match (table, &spec.kc_levels) {
            (Some(t), _) => t.snap(p),
            (None, Some(levels)) => {
                let mut l = levels.clone();
                l.sort_by(f64::total_cmp);
                KcTable {
                    centers: l.clone(),
                    medians: l,
                }
                .snap(p)
            }
            (None, None) => p,
        },
    }
}

/// The imperfection quintuplet plus the flags that shape its sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImperfectionParameterSet {
    /// Phase std as a fraction of 2π.
    #[serde(default)]
    pub sigma_phs: f64,
    /// Splitter std scale; cells have std `σ/√2`.
    #[serde(default)]
    pub sigma_bes: f64,
    /// Correlation length in grid units.
    #[serde(default = "one")]
    pub corr_len: u32,
    /// Insertion-loss std in dB.
    #[serde(default)]
    pub sigma_il: f64,
    /// Phase encoding precision; `None` keeps full precision.
    #[serde(default)]
    pub n_bits: Option<u32>,
    #[serde(default)]
    pub radial: bool,
    /// Mean insertion loss in dB.
    #[serde(default)]
    pub mu_il: f64,
    #[serde(default = "yes")]
    pub renormalize: bool,
    #[serde(default)]
    pub quant_mode: QuantMode,
}

fn one() -> u32 {
    1
}

fn yes() -> bool {
    true
}

impl Default for ImperfectionParameterSet {
    fn default() -> Self {
        Self {
            sigma_phs: 0.0,
            sigma_bes: 0.0,
            corr_len: 1,
            sigma_il: 0.0,
            n_bits: None,
            radial: false,
            mu_il: 0.0,
            renormalize: true,
            quant_mode: QuantMode::Evs,
        }
    }
}

impl ImperfectionParameterSet {
    /// No imperfection at all.
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_phs", self.sigma_phs),
            ("sigma_bes", self.sigma_bes),
            ("sigma_il", self.sigma_il),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if !self.mu_il.is_finite() {
            return Err(invalid("mu_il must be finite"));
        }
        if self.corr_len == 0 {
            return Err(invalid("corr_len must be at least 1"));
        }
        if let Some(b) = self.n_bits {
            if !(1..=MAX_BITS).contains(&b) {
                return Err(invalid(format!("n_bits must be in 1..={MAX_BITS}, got {b}")));
            }
        }
        Ok(())
    }

    pub fn structure(&self) -> MapStructure {
        MapStructure {
            radial: self.radial,
            corr_len: self.corr_len,
            renormalize: self.renormalize,
        }
    }

    pub fn quantizer(&self) -> Option<QuantizerSpec> {
        self.n_bits.map(|n_bits| QuantizerSpec {
            mode: self.quant_mode,
            n_bits,
            phase_spec: PhaseShifterSpec::default(),
            kc_levels: None,
        })
    }
}

/// Deviations of one MZI.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NodeDeviation {
    pub d_theta: f64,
    pub d_phi: f64,
    pub d_r: f64,
    pub d_t: f64,
    pub d_r2: f64,
    pub d_t2: f64,
    pub il_db: f64,
}

/// Deviations of one mesh, one entry per slot of [`grid_layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct MeshDeviation {
    pub n: usize,
    pub nodes: Vec<NodeDeviation>,
    pub quantizer: Option<QuantizerSpec>,
}

impl MeshDeviation {
    pub fn zero(n: usize) -> Self {
        Self {
            n,
            nodes: vec![NodeDeviation::default(); grid_layout(n).len()],
            quantizer: None,
        }
    }

    pub fn node(&self, layer: usize, top_mode: usize) -> Option<&NodeDeviation> {
        slot_index(self.n, layer, top_mode).and_then(|i| self.nodes.get(i))
    }
}

/// Position of `(layer, top_mode)` in [`grid_layout`] order.
pub fn slot_index(n: usize, layer: usize, top_mode: usize) -> Option<usize> {
    if n < 2 || layer >= n || top_mode + 1 >= n || layer % 2 != top_mode % 2 {
        return None;
    }
    let even = n / 2; // slots in even layers
    let odd = (n - 1) / 2;
    Some(layer.div_ceil(2) * even + (layer / 2) * odd + top_mode / 2)
}

/// One concrete realisation of a parameter set for a model shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ImperfectionInstance {
    pub meshes: Vec<MeshDeviation>,
    pub seed: u64,
    pub stream: u64,
}

impl ImperfectionInstance {
    pub fn zero(shape: &[usize]) -> Self {
        Self {
            meshes: shape.iter().map(|&n| MeshDeviation::zero(n)).collect(),
            seed: 0,
            stream: 0,
        }
    }
}

/// Random generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Samples an instance for meshes of the given sizes.
pub fn realize_instance(
    p: &ImperfectionParameterSet,
    shape: &[usize],
    seed: u64,
    stream: u64,
) -> Result<ImperfectionInstance> {
    realize_instance_with(p, shape, seed, stream, |_, _| (p.sigma_phs, p.sigma_bes))
}

/// Like [`realize_instance`] but with the phase and splitter sigmas chosen
/// per node by `sigma_at(mesh_index, slot)`.
///
/// The random draws do not depend on the sigmas, so instances that differ
/// only in `sigma_at` share their underlying noise.
pub fn realize_instance_with(
    p: &ImperfectionParameterSet,
    shape: &[usize],
    seed: u64,
    stream: u64,
    sigma_at: impl Fn(usize, &GridSlot) -> (f64, f64),
) -> Result<ImperfectionInstance> {
    p.validate()?;
    let mut rng = stream_rng(seed, stream);
    let structure = p.structure();
    let mut meshes = Vec::with_capacity(shape.len());
    for (mi, &n) in shape.iter().enumerate() {
        if n < 2 {
            meshes.push(MeshDeviation {
                n,
                nodes: Vec::new(),
                quantizer: p.quantizer(),
            });
            continue;
        }
        let g = GridShape::for_modes(n);
        let phase = unit_variation_map(g.width, g.height, structure, &mut rng)?;
        let r_map = unit_variation_map(g.width, g.height, structure, &mut rng)?;
        let t_map = unit_variation_map(g.width, g.height, structure, &mut rng)?;
        let mut nodes = Vec::new();
        for slot in grid_layout(n) {
            let z: f64 = rng.sample(StandardNormal);
            let (s_phs, s_bes) = sigma_at(mi, &slot);
            let (sp, sb) = (MapKind::Phase.cell_std(s_phs), MapKind::Splitter.cell_std(s_bes));
            let left = slot.grid_y * g.width + slot.grid_x;
            let right = left + 1;
            nodes.push(NodeDeviation {
                d_theta: sp * phase[right],
                d_phi: sp * phase[left],
                d_r: sb * r_map[left],
                d_t: sb * t_map[left],
                d_r2: sb * r_map[right],
                d_t2: sb * t_map[right],
                il_db: p.mu_il + p.sigma_il * z,
            });
        }
        meshes.push(MeshDeviation {
            n,
            nodes,
            quantizer: p.quantizer(),
        });
    }
    Ok(ImperfectionInstance { meshes, seed, stream })
}

/// Every tuned phase of a mesh, wrapped into `[0, 2π)`.
fn mesh_phases(plan: &MeshPlan) -> impl Iterator<Item = f64> + '_ {
    plan.nodes
        .iter()
        .flat_map(|n| [n.phases.theta, n.phases.phi])
        .chain(plan.phase_screen.iter().copied())
        .map(wrap_phase)
}

/// Applies deviations to a single mesh. `kc` overrides the KC table, so that
/// several meshes can share one clustering.
pub fn apply_to_mesh(plan: &MeshPlan, dev: &MeshDeviation, kc: Option<&KcTable>) -> Result<MeshPlan> {
    if plan.n != dev.n {
        return Err(Error::ShapeMismatch(format!(
            "deviation is for {} modes, mesh has {}",
            dev.n, plan.n
        )));
    }
    let owned_table;
    let table = match (&dev.quantizer, kc) {
        (Some(q), None) if q.mode == QuantMode::Kc && q.kc_levels.is_none() => {
            let phases: Vec<f64> = mesh_phases(plan).collect();
            owned_table = if phases.is_empty() {
                None
            } else {
                Some(kmeans_1d(&phases, q.level_count())?)
            };
            owned_table.as_ref()
        }
        _ => kc,
    };
    let q = |x: f64| match &dev.quantizer {
        Some(spec) => snap_one(wrap_phase(x), spec, table),
        None => x,
    };
    let mut out = plan.clone();
    for node in &mut out.nodes {
        let d = dev.node(node.layer, node.top_mode).ok_or_else(|| {
            invalid(format!(
                "no deviation for node at layer {} mode {}",
                node.layer, node.top_mode
            ))
        })?;
        node.phases.theta = q(node.phases.theta) + d.d_theta;
        node.phases.phi = q(node.phases.phi) + d.d_phi;
        node.splitters = node.splitters.perturbed(d.d_r, d.d_t, d.d_r2, d.d_t2);
        node.loss = ArmLoss::uniform(insertion_loss_to_beta(d.il_db));
    }
    if dev.quantizer.is_some() {
        out.phase_screen.iter_mut().for_each(|p| *p = q(*p));
    }
    Ok(out)
}

/// Returns a perturbed copy of `model`.
///
/// Meshes whose quantizer is an unfixed KC spec share one clustering over
/// the union of their phases.
pub fn apply_instance(model: &IpnnModel, inst: &ImperfectionInstance) -> Result<IpnnModel> {
    let sizes = model.mesh_sizes();
    if inst.meshes.len() != sizes.len() || inst.meshes.iter().zip(&sizes).any(|(d, &n)| d.n != n) {
        return Err(Error::ShapeMismatch(format!(
            "instance covers meshes {:?}, model has {:?}",
            inst.meshes.iter().map(|d| d.n).collect::<Vec<_>>(),
            sizes
        )));
    }
    // one table per distinct KC spec
    let mut tables: Vec<(QuantizerSpec, KcTable)> = Vec::new();
    for dev in &inst.meshes {
        if let Some(q) = &dev.quantizer {
            if q.mode == QuantMode::Kc && q.kc_levels.is_none() && !tables.iter().any(|(s, _)| s == q) {
                let population: Vec<f64> = model
                    .meshes()
                    .zip(&inst.meshes)
                    .filter(|(_, d)| d.quantizer.as_ref() == Some(q))
                    .flat_map(|(m, _)| mesh_phases(m).collect::<Vec<_>>())
                    .collect();
                if !population.is_empty() {
                    tables.push((q.clone(), kmeans_1d(&population, q.level_count())?));
                }
            }
        }
    }
    let mut out = model.clone();
    for (mesh, dev) in out.meshes_mut().zip(&inst.meshes) {
        let table = dev
            .quantizer
            .as_ref()
            .and_then(|q| tables.iter().find(|(s, _)| s == q).map(|(_, t)| t));
        *mesh = apply_to_mesh(mesh, dev, table)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_unitary;
    use crate::mesh::{clements_decompose, mesh_to_unitary};
    use crate::network::{build_model, build_toy_classifier, evaluate_accuracy};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn sample_std(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
    }

    fn pooled(n_maps: usize, sigma: f64, kind: MapKind, s: MapStructure, seed: u64) -> Vec<f64> {
        let mut rng = stream_rng(seed, 0);
        (0..n_maps)
            .flat_map(|_| generate_variation_map(32, 15, sigma, kind, s, &mut rng).unwrap().values)
            .collect()
    }

    #[test]
    fn zero_sigma_map_is_zero() {
        let mut rng = stream_rng(1, 0);
        let m = generate_variation_map(8, 3, 0.0, MapKind::Phase, MapStructure::UNCORRELATED, &mut rng).unwrap();
        assert!(m.values.iter().all(|v| *v == 0.0));
        assert!(generate_variation_map(0, 3, 0.1, MapKind::Phase, MapStructure::UNCORRELATED, &mut rng).is_err());
        assert!(generate_variation_map(3, 3, -0.1, MapKind::Phase, MapStructure::UNCORRELATED, &mut rng).is_err());
    }

    #[test]
    fn uncorrelated_map_statistics() {
        for (kind, sigma) in [(MapKind::Phase, 0.025), (MapKind::Splitter, 0.05)] {
            let v = pooled(209, sigma, kind, MapStructure::UNCORRELATED, 2);
            assert!(v.len() >= 100_000);
            let target = kind.cell_std(sigma);
            let std = sample_std(&v);
            assert!((std / target - 1.0).abs() < 0.05, "{kind:?}: {std} vs {target}");
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean.abs() < 3.0 * target / (v.len() as f64).sqrt());
        }
    }

    #[test]
    fn correlated_map_keeps_target_std() {
        for l in [2, 4, 8] {
            let s = MapStructure {
                radial: false,
                corr_len: l,
                renormalize: true,
            };
            let v = pooled(209, 0.025, MapKind::Phase, s, 3);
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            assert!((rms / (TAU * 0.025) - 1.0).abs() < 0.05, "L={l}: {rms}");
        }
    }

    #[test]
    fn smoothing_without_renormalisation_shrinks() {
        let s = MapStructure {
            radial: false,
            corr_len: 4,
            renormalize: false,
        };
        let mut rng = stream_rng(4, 0);
        let raw = unit_variation_map(32, 15, s, &mut rng).unwrap();
        let mut rng = stream_rng(4, 0);
        let base = unit_variation_map(32, 15, MapStructure::UNCORRELATED, &mut rng).unwrap();
        // brute-force 2-D convolution with the kernel
        for (y, x) in [(0, 0), (7, 15), (14, 31), (3, 20)] {
            let mut want = 0.0;
            for ys in 0..15 {
                for xs in 0..32 {
                    want += kernel_value(x as f64 - xs as f64, y as f64 - ys as f64, 4.0) * base[ys * 32 + xs];
                }
            }
            assert!((raw[y * 32 + x] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn radial_std_follows_distance() {
        let s = MapStructure {
            radial: true,
            corr_len: 1,
            renormalize: true,
        };
        let mut rng = stream_rng(5, 0);
        let (mut corner, mut centre) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let m = generate_variation_map(32, 15, 0.025, MapKind::Phase, s, &mut rng).unwrap();
            corner.push(m.get(0, 0));
            centre.push(m.get(15, 7));
        }
        let d_corner = (15.5f64.powi(2) + 7f64.powi(2)).sqrt();
        let d_centre = 0.5;
        let ratio = sample_std(&corner) / sample_std(&centre);
        assert!((ratio / (d_corner / d_centre) - 1.0).abs() < 0.1, "ratio {ratio}");
        assert!((sample_std(&corner) / (TAU * 0.025) - 1.0).abs() < 0.05);
        assert_eq!(radial_weight(0, 0, 32, 15), 1.0);
    }

    fn lag_correlation(v: &[f64], width: usize, lag: usize) -> f64 {
        let mut num = 0.0;
        let mut count = 0;
        for row in v.chunks(width) {
            for x in 0..width - lag {
                num += row[x] * row[x + lag];
                count += 1;
            }
        }
        let var = v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        num / count as f64 / var
    }

    #[test]
    fn longer_correlation_spreads_variation() {
        let mut rng = stream_rng(6, 0);
        let mut mean_corr = |l: u32| {
            let s = MapStructure {
                radial: false,
                corr_len: l,
                renormalize: true,
            };
            (0..100)
                .map(|_| lag_correlation(&unit_variation_map(32, 15, s, &mut rng).unwrap(), 32, 4))
                .sum::<f64>()
                / 100.0
        };
        let c1 = mean_corr(1);
        let c8 = mean_corr(8);
        assert!(c8 > c1 + 0.3, "L=1 {c1}, L=8 {c8}");
    }

    #[test]
    fn csv_export() {
        let mut rng = stream_rng(7, 0);
        let m = generate_variation_map(4, 2, 0.1, MapKind::Splitter, MapStructure::UNCORRELATED, &mut rng).unwrap();
        let csv = m.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "width,height,sigma,kind,radial,L");
        assert_eq!(lines[1], "4,2,0.1,splitter,false,1");
        assert_eq!(lines.len(), 4);
        let first: Vec<f64> = lines[2].split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(first, m.values[..4]);
    }

    #[test]
    fn beta_from_loss() {
        assert_eq!(insertion_loss_to_beta(0.0), 1.0);
        assert!((insertion_loss_to_beta(1.2) - 10f64.powf(-0.03)).abs() < 1e-15);
        assert!((insertion_loss_to_beta(1.2) - 0.93325).abs() < 1e-5);
        assert!((insertion_loss_to_beta(3.0103).powi(4) - 0.5).abs() < 1e-5);
        assert!(insertion_loss_to_beta(-1.0) > 1.0);
    }

    #[test]
    fn evs_one_bit() {
        let q = QuantizerSpec::new(QuantMode::Evs, 1).unwrap();
        let out = quantize_phases(&[0.0, 1.0, 4.0, TAU], &q).unwrap();
        for v in &out {
            assert!(v.abs() < 1e-12 || (v - TAU).abs() < 1e-12, "{v}");
        }
        assert!((q.phase_spec.v_max - 6.166).abs() < 1e-3);
    }

    #[test]
    fn eps_two_bits() {
        let q = QuantizerSpec::new(QuantMode::Eps, 2).unwrap();
        let out = quantize_phases(&[0.0, PI, 2.0 * PI / 3.0 + 0.1, TAU], &q).unwrap();
        assert!((out[0]).abs() < 1e-15);
        // π sits exactly between 2π/3 and 4π/3 and goes down
        assert!((out[1] - 2.0 * PI / 3.0).abs() < 1e-12);
        assert!((out[2] - 2.0 * PI / 3.0).abs() < 1e-12);
        assert!((out[3] - TAU).abs() < 1e-12);
        assert!(quantize_phases(&[7.0], &q).is_err());
        assert!(quantize_phases(&[-0.1], &q).is_err());
    }

    #[test]
    fn evs_spacing_grows_with_phase() {
        for bits in 1..=8 {
            let q = QuantizerSpec::new(QuantMode::Evs, bits).unwrap();
            let top = q.level_count() - 1;
            let step = q.phase_spec.v_max / top as f64;
            let levels: Vec<f64> = (0..=top).map(|i| q.phase_spec.k * (i as f64 * step).powi(2)).collect();
            for w in levels.windows(3) {
                assert!(w[2] - w[1] > w[1] - w[0]);
            }
            // every level is a fixed point
            let back = quantize_phases(&levels[..levels.len() - 1], &q).unwrap();
            for (a, b) in back.iter().zip(&levels) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kc_exact_when_few_distinct_values() {
        let q = QuantizerSpec::new(QuantMode::Kc, 2).unwrap();
        let phases = [0.5, 1.5, 0.5, 3.0, 6.0, 1.5];
        assert_eq!(quantize_phases(&phases, &q).unwrap(), phases.to_vec());
    }

    #[test]
    fn kc_snaps_to_cluster_medians() {
        let q = QuantizerSpec::new(QuantMode::Kc, 1).unwrap();
        let out = quantize_phases(&[0.1, 0.2, 0.6, 5.0, 5.2], &q).unwrap();
        assert_eq!(out, vec![0.2, 0.2, 0.2, 5.1, 5.1]);
        let fixed = QuantizerSpec {
            kc_levels: Some(vec![1.0, 4.0]),
            ..q
        };
        assert_eq!(
            quantize_phases(&[0.0, 2.5, 2.6, 6.0], &fixed).unwrap(),
            vec![1.0, 1.0, 4.0, 4.0]
        );
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // quantile seeds collide on the repeated value
        let mut v = vec![1.0; 50];
        v.extend([2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = kmeans_1d(&v, 4).unwrap();
        assert_eq!(t.centers.len(), 4);
        assert!(t.centers.iter().all(|c| c.is_finite()));
        assert!(t.medians.contains(&1.0));
    }

    #[test]
    fn slot_index_matches_layout() {
        for n in 2..=12 {
            for (i, s) in grid_layout(n).iter().enumerate() {
                assert_eq!(slot_index(n, s.layer, s.top_mode), Some(i));
            }
            assert_eq!(slot_index(n, 0, 1), None);
        }
    }

    #[test]
    fn realisation_is_deterministic() {
        let p = ImperfectionParameterSet {
            sigma_phs: 0.02,
            sigma_bes: 0.03,
            corr_len: 2,
            sigma_il: 0.1,
            ..Default::default()
        };
        let a = realize_instance(&p, &[4, 4, 3], 11, 5).unwrap();
        let b = realize_instance(&p, &[4, 4, 3], 11, 5).unwrap();
        assert_eq!(a, b);
        let c = realize_instance(&p, &[4, 4, 3], 11, 6).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.meshes[2].nodes.len(), 3);
    }

    #[test]
    fn phase_only_leaves_splitters_alone() {
        let p = ImperfectionParameterSet {
            sigma_phs: 0.05,
            ..Default::default()
        };
        let inst = realize_instance(&p, &[6], 1, 0).unwrap();
        for d in &inst.meshes[0].nodes {
            assert_eq!([d.d_r, d.d_t, d.d_r2, d.d_t2, d.il_db], [0.0; 5]);
            assert!(d.d_theta != 0.0 && d.d_phi != 0.0);
        }
    }

    #[test]
    fn cells_map_to_parameters() {
        let p = ImperfectionParameterSet {
            sigma_phs: 0.1,
            sigma_bes: 0.1,
            ..Default::default()
        };
        let inst = realize_instance(&p, &[3], 9, 0).unwrap();
        let mut rng = stream_rng(9, 0);
        let g = GridShape::for_modes(3);
        let phase = unit_variation_map(g.width, g.height, p.structure(), &mut rng).unwrap();
        let r = unit_variation_map(g.width, g.height, p.structure(), &mut rng).unwrap();
        let t = unit_variation_map(g.width, g.height, p.structure(), &mut rng).unwrap();
        let (sp, sb) = (TAU * 0.1, 0.1 / SQRT_2);
        for (slot, d) in grid_layout(3).iter().zip(&inst.meshes[0].nodes) {
            let left = slot.grid_y * g.width + slot.grid_x;
            assert_eq!(d.d_phi, sp * phase[left]);
            assert_eq!(d.d_theta, sp * phase[left + 1]);
            assert_eq!(d.d_r, sb * r[left]);
            assert_eq!(d.d_t, sb * t[left]);
            assert_eq!(d.d_r2, sb * r[left + 1]);
            assert_eq!(d.d_t2, sb * t[left + 1]);
        }
    }

    #[test]
    fn zero_instance_is_transparent() {
        let (model, data) = build_toy_classifier(4).unwrap();
        let inst = realize_instance(&ImperfectionParameterSet::zero(), &model.mesh_sizes(), 3, 0).unwrap();
        let moved = apply_instance(&model, &inst).unwrap();
        let x: Vec<Complex64> = (0..4).map(|i| Complex64::new(i as f64, 1.0)).collect();
        let a = model.forward(&x).unwrap();
        let b = moved.forward(&x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() < 1e-12);
        }
        assert_eq!(evaluate_accuracy(&moved, &data).unwrap(), 1.0);
        assert!(apply_instance(&model, &ImperfectionInstance::zero(&[3, 3])).is_err());
    }

    #[test]
    fn uniform_loss_on_single_mzi() {
        let mut rng = stream_rng(8, 0);
        let plan = clements_decompose(&random_unitary(2, &mut rng), 1e-10).unwrap();
        let mut dev = MeshDeviation::zero(2);
        dev.nodes[0].il_db = 1.2;
        let lossy = mesh_to_unitary(&apply_to_mesh(&plan, &dev, None).unwrap());
        let beta = insertion_loss_to_beta(1.2);
        for j in 0..2 {
            let norm: f64 = lossy.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!((norm - beta * beta).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_loss_scales_each_mzi() {
        let mut rng = stream_rng(10, 0);
        let n = 5;
        let plan = clements_decompose(&random_unitary(n, &mut rng), 1e-10).unwrap();
        let c = 0.5;
        let mut dev = MeshDeviation::zero(n);
        dev.nodes.iter_mut().for_each(|d| d.il_db = c);
        let lossy = mesh_to_unitary(&apply_to_mesh(&plan, &dev, None).unwrap());
        // oracle: propagate every basis vector, scaling both modes by β² at each MZI
        let b2 = insertion_loss_to_beta(c).powi(2);
        let nominal = mesh_to_unitary(&plan);
        let mut want = crate::linalg::ComplexMatrix::identity(n);
        for node in &plan.nodes {
            let mut blk = node.block();
            blk.iter_mut().flatten().for_each(|z| *z *= b2);
            want.apply_left_2x2(node.top_mode, &blk);
        }
        for (i, &psi) in plan.phase_screen.iter().enumerate() {
            for j in 0..n {
                want[(i, j)] *= Complex64::cis(psi);
            }
        }
        assert!(lossy.sub(&want).unwrap().max_abs() < 1e-12);
        for j in 0..n {
            let norm: f64 = lossy.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let full: f64 = nominal.column(j).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            assert!(norm < full && norm >= b2.powi(n as i32) * full - 1e-12);
        }
    }

    #[test]
    fn quantisation_precedes_uncertainty() {
        let mut rng = stream_rng(12, 0);
        let plan = clements_decompose(&random_unitary(3, &mut rng), 1e-10).unwrap();
        let mut dev = MeshDeviation::zero(3);
        dev.quantizer = Some(QuantizerSpec::new(QuantMode::Eps, 3).unwrap());
        dev.nodes[0].d_theta = 0.01;
        let out = apply_to_mesh(&plan, &dev, None).unwrap();
        let step = TAU / 7.0;
        let first = out.nodes.iter().find(|n| n.layer == 0 && n.top_mode == 0).unwrap();
        let q = first.phases.theta - 0.01;
        assert!(((q / step).round() * step - q).abs() < 1e-12);
        for psi in &out.phase_screen {
            assert!(((psi / step).round() * step - psi).abs() < 1e-12);
        }
    }

    #[test]
    fn kc_with_enough_levels_keeps_accuracy() {
        let (model, data) = build_toy_classifier(4).unwrap();
        let p = ImperfectionParameterSet {
            n_bits: Some(8),
            quant_mode: QuantMode::Kc,
            ..Default::default()
        };
        let inst = realize_instance(&p, &model.mesh_sizes(), 1, 0).unwrap();
        let moved = apply_instance(&model, &inst).unwrap();
        // 2 meshes × (6 nodes × 2 + 4) phases ≤ 256 levels
        for (a, b) in model.meshes().zip(moved.meshes()) {
            for (x, y) in a.nodes.iter().zip(&b.nodes) {
                assert_eq!(wrap_phase(x.phases.theta), y.phases.theta);
                assert_eq!(wrap_phase(x.phases.phi), y.phases.phi);
            }
        }
        assert_eq!(evaluate_accuracy(&moved, &data).unwrap(), 1.0);
    }

    #[test]
    fn fine_quantisation_is_nearly_exact() {
        let mut rng = stream_rng(13, 0);
        let w = crate::linalg::random_matrix(4, 4, &mut rng);
        let model = build_model(&[w]).unwrap();
        for mode in [QuantMode::Evs, QuantMode::Eps, QuantMode::Kc] {
            let p = ImperfectionParameterSet {
                n_bits: Some(20),
                quant_mode: mode,
                ..Default::default()
            };
            let inst = realize_instance(&p, &model.mesh_sizes(), 1, 0).unwrap();
            let moved = apply_instance(&model, &inst).unwrap();
            let diff = moved.layers[0]
                .matrix()
                .sub(&model.layers[0].matrix())
                .unwrap()
                .max_abs();
            assert!(diff < 1e-4, "{mode:?}: {diff}");
        }
    }

    #[test]
    fn parameter_set_json() {
        let p: ImperfectionParameterSet =
            serde_json::from_str(r#"{"sigma_phs":0.01,"n_bits":4,"quant_mode":"KC"}"#).unwrap();
        assert_eq!(p.corr_len, 1);
        assert!(p.renormalize);
        assert_eq!(p.quant_mode, QuantMode::Kc);
        assert!(serde_json::from_str::<ImperfectionParameterSet>(r#"{"sigma":1}"#).is_err());
        let bad = ImperfectionParameterSet {
            sigma_bes: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn eps_error_bound(bits in 1u32..10, phases in proptest::collection::vec(0.0..TAU, 1..40)) {
            let q = QuantizerSpec::new(QuantMode::Eps, bits).unwrap();
            let out = quantize_phases(&phases, &q).unwrap();
            let bound = PI / ((1u64 << bits) - 1) as f64;
            for (a, b) in phases.iter().zip(&out) {
                prop_assert!((a - b).abs() <= bound + 1e-12);
            }
        }

        #[test]
        fn evs_error_within_local_spacing(bits in 1u32..10, phases in proptest::collection::vec(0.0..TAU, 1..40)) {
            let q = QuantizerSpec::new(QuantMode::Evs, bits).unwrap();
            let out = quantize_phases(&phases, &q).unwrap();
            let ps = q.phase_spec;
            let step = ps.v_max / ((1u64 << bits) - 1) as f64;
            for (a, b) in phases.iter().zip(&out) {
                let i = ((a / ps.k).sqrt() / step).floor();
                let lo = ps.k * (i * step).powi(2);
                let hi = ps.k * ((i + 1.0) * step).powi(2);
                prop_assert!((a - b).abs() <= (hi - lo) + 1e-9);
                prop_assert!((0.0..=TAU + 1e-9).contains(b));
            }
        }

        #[test]
        fn splitters_stay_in_unit_interval(seed in any::<u64>(), sigma in 0.0f64..3.0) {
            let p = ImperfectionParameterSet { sigma_bes: sigma, ..Default::default() };
            let inst = realize_instance(&p, &[4], seed, 0).unwrap();
            let mut rng = stream_rng(seed, 1);
            let plan = clements_decompose(&random_unitary(4, &mut rng), 1e-8).unwrap();
            let out = apply_to_mesh(&plan, &inst.meshes[0], None).unwrap();
            for n in &out.nodes {
                for v in [n.splitters.r, n.splitters.t, n.splitters.r2, n.splitters.t2] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn kc_output_is_a_level(seed in any::<u64>(), bits in 1u32..4) {
            let mut rng = stream_rng(seed, 0);
            let phases: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..TAU)).collect();
            let q = QuantizerSpec::new(QuantMode::Kc, bits).unwrap();
            let out = quantize_phases(&phases, &q).unwrap();
            let mut distinct = out.clone();
            distinct.sort_by(f64::total_cmp);
            distinct.dedup();
            prop_assert!(distinct.len() <= 1 << bits);
        }
    }
}
