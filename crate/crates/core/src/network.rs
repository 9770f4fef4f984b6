//! Complex-valued MLPs realised on MZI meshes.
//!
//! Every weight `W = U·Σ·Vᴴ` becomes two meshes and an attenuating diagonal
//! with one global gain. Hidden layers apply softplus to the modulus and keep
//! the phase; the readout takes intensities followed by a log-softmax.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{dft2_shifted, random_matrix, svd, ComplexMatrix};
use crate::mesh::{clements_decompose, diagonal_stage, mesh_to_unitary, DiagonalStage, MeshPlan};

/// Reconstruction tolerance used when decomposing weight factors.
pub const DECOMPOSE_TOLERANCE: f64 = 1e-8;

/// Side length of the images [`extract_features`] expects.
pub const IMAGE_SIDE: usize = 28;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinearLayer {
    pub u_mesh: MeshPlan,
    pub diag: DiagonalStage,
    pub v_h_mesh: MeshPlan,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    /// Factorises a weight matrix into its photonic realisation.
    pub fn from_weight(w: &ComplexMatrix) -> Result<Self> {
        let f = svd(w)?;
        Ok(Self {
            u_mesh: decompose(&f.u)?,
            diag: diagonal_stage(&f.singular_values)?,
            v_h_mesh: decompose(&f.v_h)?,
            in_dim: w.cols(),
            out_dim: w.rows(),
        })
    }

    /// Dense `out_dim × in_dim` operator of the current mesh settings.
    pub fn matrix(&self) -> ComplexMatrix {
        let u = mesh_to_unitary(&self.u_mesh);
        let v_h = mesh_to_unitary(&self.v_h_mesh);
        // rectangular Σ: only the first min(out, in) rows of Vᴴ survive
        let mut sv = ComplexMatrix::zeros(self.out_dim, self.in_dim);
        for (k, s) in self.diag.values().into_iter().enumerate() {
            for j in 0..self.in_dim {
                sv[(k, j)] = v_h[(k, j)] * s;
            }
        }
        u.matmul(&sv)
    }

    fn validate(&self) -> Result<()> {
        self.u_mesh.validate()?;
        self.v_h_mesh.validate()?;
        if self.u_mesh.n != self.out_dim
            || self.v_h_mesh.n != self.in_dim
            || self.diag.scalars.len() != self.out_dim.min(self.in_dim)
        {
            return Err(Error::ShapeMismatch(format!(
                "layer {}x{} has meshes of size {} and {} with {} diagonal entries",
                self.out_dim,
                self.in_dim,
                self.u_mesh.n,
                self.v_h_mesh.n,
                self.diag.scalars.len()
            )));
        }
        Ok(())
    }
}

fn decompose(u: &ComplexMatrix) -> Result<MeshPlan> {
    if u.rows() == 1 && u.cols() == 1 {
        return Ok(MeshPlan {
            n: 1,
            nodes: Vec::new(),
            phase_screen: vec![crate::device::wrap_phase(u[(0, 0)].arg())],
        });
    }
    clements_decompose(u, DECOMPOSE_TOLERANCE)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IpnnModel {
    pub layers: Vec<LinearLayer>,
}

impl IpnnModel {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a model needs at least one layer"));
        }
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            if i > 0 && layers[i - 1].out_dim != layer.in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    layer.in_dim,
                    i - 1,
                    layers[i - 1].out_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Mesh sizes in the order `[U₀, Vᴴ₀, U₁, Vᴴ₁, …]`.
    pub fn mesh_sizes(&self) -> Vec<usize> {
        self.layers.iter().flat_map(|l| [l.u_mesh.n, l.v_h_mesh.n]).collect()
    }

    /// Meshes in the order of [`IpnnModel::mesh_sizes`].
    pub fn meshes(&self) -> impl Iterator<Item = &MeshPlan> {
        self.layers.iter().flat_map(|l| [&l.u_mesh, &l.v_h_mesh])
    }

    pub fn meshes_mut(&mut self) -> impl Iterator<Item = &mut MeshPlan> {
        self.layers.iter_mut().flat_map(|l| [&mut l.u_mesh, &mut l.v_h_mesh])
    }

    /// Evaluates every mesh once so repeated inference is a few mat-vecs.
    pub fn compile(&self) -> CompiledModel {
        CompiledModel {
            weights: self.layers.iter().map(LinearLayer::matrix).collect(),
        }
    }

    pub fn forward(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        self.compile().forward(x)
    }
}

/// Dense per-layer operators of a model.
#[derive(Clone, Debug)]
pub struct CompiledModel {
    pub weights: Vec<ComplexMatrix>,
}

impl CompiledModel {
    pub fn input_dim(&self) -> usize {
        self.weights[0].cols()
    }

    /// Log-probabilities for one input.
    pub fn forward(&self, x: &[Complex64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(forward_dense(&self.weights, x))
    }
}

fn forward_dense(weights: &[ComplexMatrix], x: &[Complex64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let last = weights.len() - 1;
    for (i, w) in weights.iter().enumerate() {
        h = w.mul_vec(&h);
        if i < last {
            h.iter_mut().for_each(|z| *z = modulus_softplus(*z));
        }
    }
    let intensities: Vec<f64> = h.iter().map(|z| z.norm_sqr()).collect();
    log_softmax(&intensities)
}

/// `ln(1 + eᵃ)` without overflow.
pub fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

/// Softplus of the modulus with the phase preserved; `ln 2` at the origin.
pub fn modulus_softplus(z: Complex64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 {
        Complex64::new(std::f64::consts::LN_2, 0.0)
    } else {
        z * (softplus(r) / r)
    }
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Factorises each weight and checks the dimension chain.
pub fn build_model(weights: &[ComplexMatrix]) -> Result<IpnnModel> {
    for (i, pair) in weights.windows(2).enumerate() {
        if pair[1].cols() != pair[0].rows() {
            return Err(Error::InvalidInput(format!(
                "weight {} is {}x{} but weight {i} has {} rows",
                i + 1,
                pair[1].rows(),
                pair[1].cols(),
                pair[0].rows()
            )));
        }
    }
    IpnnModel::new(weights.iter().map(LinearLayer::from_weight).collect::<Result<_>>()?)
}

/// Labelled complex feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<Vec<Complex64>>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, samples: Vec<Vec<Complex64>>, labels: Vec<usize>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| s.len() != dim) {
            return Err(Error::ShapeMismatch(format!("sample {i} does not have {dim} features")));
        }
        if let Some(i) = labels.iter().position(|&l| l >= classes) {
            return Err(invalid(format!("label of sample {i} is not below {classes}")));
        }
        if samples.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(invalid("dataset features must be finite"));
        }
        Ok(Self {
            dim,
            classes,
            samples,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Same samples with labels remapped through `perm`.
    pub fn relabelled(&self, perm: &[usize]) -> Result<Self> {
        Self::new(
            self.dim,
            self.classes,
            self.samples.clone(),
            self.labels.iter().map(|&l| perm[l]).collect(),
        )
    }
}

/// Fraction of samples whose most likely class equals the label.
pub fn evaluate_accuracy(model: &IpnnModel, data: &Dataset) -> Result<f64> {
    accuracy_compiled(&model.compile(), data)
}

pub fn accuracy_compiled(model: &CompiledModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut correct = 0usize;
    for (x, &label) in data.samples.iter().zip(&data.labels) {
        if argmax(&model.forward(x)?) == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Mean negative log-likelihood of the labels.
pub fn cross_entropy(model: &CompiledModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let mut total = 0.0;
    for (x, &label) in data.samples.iter().zip(&data.labels) {
        total -= model.forward(x)?[label];
    }
    Ok(total / data.len() as f64)
}

/// Central `k × k` block of the shifted spectrum, flattened row-major.
pub fn extract_features(image: &[f64], k: usize) -> Result<Vec<Complex64>> {
    if k == 0 || !k.is_multiple_of(2) || k > IMAGE_SIDE {
        return Err(invalid(format!("crop must be even and in 2..={IMAGE_SIDE}, got {k}")));
    }
    let spectrum = dft2_shifted(image, IMAGE_SIDE, IMAGE_SIDE)?;
    let start = IMAGE_SIDE / 2 - k / 2;
    let mut out = Vec::with_capacity(k * k);
    for i in start..start + k {
        for j in start..start + k {
            out.push(spectrum[(i, j)]);
        }
    }
    Ok(out)
}

/// Amplitude of the toy inputs; large enough that the softplus offset stays
/// well below the signal.
pub const TOY_AMPLITUDE: f64 = 3.0;

fn toy_basis(n: usize) -> Result<Dataset> {
    let samples = (0..n)
        .map(|i| {
            let mut x = vec![Complex64::new(0.0, 0.0); n];
            x[i] = Complex64::new(TOY_AMPLITUDE, 0.0);
            x
        })
        .collect();
    Dataset::new(n, n, samples, (0..n).collect())
}

fn check_toy_classes(n: usize) -> Result<()> {
    if !(2..=16).contains(&n) {
        return Err(invalid(format!("toy classifiers support 2..=16 classes, got {n}")));
    }
    Ok(())
}

/// Single identity layer classifying scaled basis vectors.
pub fn build_toy_classifier(n_classes: usize) -> Result<(IpnnModel, Dataset)> {
    check_toy_classes(n_classes)?;
    let model = build_model(&[ComplexMatrix::identity(n_classes)])?;
    Ok((model, toy_basis(n_classes)?))
}

/// `depth` stacked identity layers over the same basis dataset.
pub fn build_deep_toy_classifier(n_classes: usize, depth: usize) -> Result<(IpnnModel, Dataset)> {
    check_toy_classes(n_classes)?;
    if depth == 0 {
        return Err(invalid("depth must be at least 1"));
    }
    let weights = vec![ComplexMatrix::identity(n_classes); depth];
    Ok((build_model(&weights)?, toy_basis(n_classes)?))
}

/// Random mixing layers and random inputs labelled by the model's own
/// prediction, so nominal accuracy is exactly 1 but every sample carries a
/// finite decision margin.
pub fn build_teacher_classifier(
    n_classes: usize,
    depth: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(IpnnModel, Dataset)> {
    check_toy_classes(n_classes)?;
    if depth == 0 || n_samples == 0 {
        return Err(invalid("depth and sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let norm = Complex64::new(1.0 / (n_classes as f64).sqrt(), 0.0);
    let weights: Vec<ComplexMatrix> = (0..depth)
        .map(|_| random_matrix(n_classes, n_classes, &mut rng).scale(norm))
        .collect();
    let model = build_model(&weights)?;
    let compiled = model.compile();
    let amp = norm * TOY_AMPLITUDE;
    let samples: Vec<Vec<Complex64>> = (0..n_samples)
        .map(|_| random_matrix(n_classes, 1, &mut rng).scale(amp).column(0))
        .collect();
    let labels = samples
        .iter()
        .map(|x| compiled.forward(x).map(|lp| argmax(&lp)))
        .collect::<Result<Vec<_>>>()?;
    Ok((model, Dataset::new(n_classes, n_classes, samples, labels)?))
}

/// Weight file contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFile {
    pub format: u32,
    pub layers: Vec<WeightRecord>,
}

/// One complex matrix with nested row-major parts. Also the on-disk format
/// of standalone unitaries.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightRecord {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

pub const FORMAT_VERSION: u32 = 1;

fn check_format(format: u32) -> Result<()> {
    if format != FORMAT_VERSION {
        return Err(invalid(format!("unsupported format version {format}")));
    }
    Ok(())
}

impl WeightFile {
    pub fn from_matrices(weights: &[ComplexMatrix]) -> Self {
        Self {
            format: FORMAT_VERSION,
            layers: weights.iter().map(WeightRecord::from_matrix).collect(),
        }
    }

    pub fn to_matrices(&self) -> Result<Vec<ComplexMatrix>> {
        check_format(self.format)?;
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                l.to_matrix()
                    .map_err(|e| Error::ShapeMismatch(format!("layer {i}: {e}")))
            })
            .collect()
    }
}

impl WeightRecord {
    pub fn from_matrix(w: &ComplexMatrix) -> Self {
        let (re, im) = w.to_parts();
        Self {
            rows: w.rows(),
            cols: w.cols(),
            re,
            im,
        }
    }

    /// The matrix, checked against the declared shape.
    pub fn to_matrix(&self) -> Result<ComplexMatrix> {
        let m = ComplexMatrix::from_parts(&self.re, &self.im)?;
        if m.rows() != self.rows || m.cols() != self.cols {
            return Err(Error::ShapeMismatch(format!(
                "declared {}x{} but holds {}x{}",
                self.rows,
                self.cols,
                m.rows(),
                m.cols()
            )));
        }
        Ok(m)
    }
}

/// Dataset file contents.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub format: u32,
    pub dim: usize,
    pub classes: usize,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub label: usize,
}

impl DatasetFile {
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            format: FORMAT_VERSION,
            dim: data.dim,
            classes: data.classes,
            samples: data
                .samples
                .iter()
                .zip(&data.labels)
                .map(|(x, &label)| SampleRecord {
                    re: x.iter().map(|z| z.re).collect(),
                    im: x.iter().map(|z| z.im).collect(),
                    label,
                })
                .collect(),
        }
    }

    pub fn to_dataset(&self) -> Result<Dataset> {
        check_format(self.format)?;
        let mut samples = Vec::with_capacity(self.samples.len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.re.len() != s.im.len() {
                return Err(Error::ShapeMismatch(format!("sample {i}: re and im lengths differ")));
            }
            samples.push(s.re.iter().zip(&s.im).map(|(&a, &b)| Complex64::new(a, b)).collect());
        }
        Dataset::new(
            self.dim,
            self.classes,
            samples,
            self.samples.iter().map(|s| s.label).collect(),
        )
    }
}

/// Finite-difference step for phases and diagonal scalars.
pub const FD_STEP: f64 = 1e-4;

/// Outcome of [`train_finite_difference`].
#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: IpnnModel,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_taken: usize,
}

/// Tunable parameters of a model, flattened: every mesh's node phases and
/// screen, then every diagonal scalar.
fn read_params(model: &IpnnModel) -> Vec<f64> {
    let mut p = Vec::new();
    for layer in &model.layers {
        for mesh in [&layer.u_mesh, &layer.v_h_mesh] {
            for node in &mesh.nodes {
                p.push(node.phases.theta);
                p.push(node.phases.phi);
            }
            p.extend_from_slice(&mesh.phase_screen);
        }
        p.extend_from_slice(&layer.diag.scalars);
    }
    p
}

fn write_params(model: &mut IpnnModel, p: &[f64]) {
    let mut it = p.iter().copied();
    for layer in &mut model.layers {
        for mesh in [&mut layer.u_mesh, &mut layer.v_h_mesh] {
            for node in &mut mesh.nodes {
                node.phases.theta = it.next().unwrap();
                node.phases.phi = it.next().unwrap();
            }
            for psi in &mut mesh.phase_screen {
                *psi = it.next().unwrap();
            }
        }
        for s in &mut layer.diag.scalars {
            *s = it.next().unwrap();
        }
    }
}

fn clamp_scalars(model: &IpnnModel, p: &mut [f64]) {
    let mut i = 0;
    for layer in &model.layers {
        i += [&layer.u_mesh, &layer.v_h_mesh]
            .iter()
            .map(|m| 2 * m.nodes.len() + m.phase_screen.len())
            .sum::<usize>();
        for v in &mut p[i..i + layer.diag.scalars.len()] {
            *v = v.clamp(0.0, 1.0);
        }
        i += layer.diag.scalars.len();
    }
}

fn loss_at(model: &mut IpnnModel, p: &[f64], data: &Dataset) -> Result<f64> {
    write_params(model, p);
    cross_entropy(&model.compile(), data)
}

/// Central-difference gradient of the cross-entropy.
pub fn finite_difference_gradient(model: &IpnnModel, data: &Dataset, h: f64) -> Result<Vec<f64>> {
    let base = read_params(model);
    let mut work = model.clone();
    let mut probe = base.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let up = loss_at(&mut work, &probe, data)?;
        probe[i] = base[i] - h;
        let down = loss_at(&mut work, &probe, data)?;
        probe[i] = base[i];
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Trains a randomly initialised model of the given `(rows, cols)` weight
/// shapes by gradient descent over phases and diagonal scalars.
///
/// A step that raises the loss is retried with half the rate, so the loss
/// never increases.
pub fn train_finite_difference(
    shapes: &[(usize, usize)],
    data: &Dataset,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<TrainReport> {
    if !(learning_rate > 0.0 && learning_rate.is_finite()) {
        return Err(invalid("learning rate must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<ComplexMatrix> = shapes
        .iter()
        .map(|&(r, c)| {
            let scale = Complex64::new(1.0 / (c as f64).sqrt(), 0.0);
            random_matrix(r, c, &mut rng).scale(scale)
        })
        .collect();
    let model = build_model(&weights)?;
    if model.input_dim() != data.dim || model.output_dim() < data.classes {
        return Err(Error::ShapeMismatch("model shape does not fit the dataset".into()));
    }
    train_model(model, data, steps, learning_rate)
}

/// Gradient descent from an existing model.
pub fn train_model(mut model: IpnnModel, data: &Dataset, steps: usize, learning_rate: f64) -> Result<TrainReport> {
    let mut params = read_params(&model);
    let initial = cross_entropy(&model.compile(), data)?;
    let mut current = initial;
    let mut rate = learning_rate;
    let mut taken = 0;
    let mut trial = params.clone();
    for _ in 0..steps {
        let grad = finite_difference_gradient(&model, data, FD_STEP)?;
        let mut accepted = false;
        for _ in 0..30 {
            for ((t, p), g) in trial.iter_mut().zip(&params).zip(&grad) {
                *t = p - rate * g;
            }
            clamp_scalars(&model, &mut trial);
            let loss = loss_at(&mut model, &trial, data)?;
            if loss <= current {
                current = loss;
                params.clone_from(&trial);
                accepted = true;
                rate = (rate * 1.2).min(learning_rate * 8.0);
                break;
            }
            rate *= 0.5;
        }
        if !accepted {
            break;
        }
        taken += 1;
    }
    write_params(&mut model, &params);
    Ok(TrainReport {
        model,
        initial_loss: initial,
        final_loss: current,
        steps_taken: taken,
    })
}
