//! Seeded synthetic scenarios.
//!
//! Every generator draws covariates, models and noise from three independent
//! ChaCha streams of the scenario seed. Changing only the heterogeneity level
//! therefore keeps covariates and noise fixed, which makes sweeps over it
//! smooth.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClientData, FederatedDataset};
use crate::error::{Error, Result};
use crate::kernel::KernelSpec;

const STREAM_COVARIATES: u64 = 0;
const STREAM_MODELS: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// How the client models are spread at heterogeneity level `Gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `theta_i* = theta* +- (Gamma/2) u`, alternating by client.
    Symmetric,
    /// The probe clients (see [`probe_clients`]) keep `theta*`; every other
    /// client sits at `theta* + Gamma u`.
    Anchored,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Family {
    LinearHomogeneous,
    Heterogeneous { gamma: f64, layout: Layout },
    Subspace { rank: usize },
    Chebyshev,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Noise {
    Gaussian,
    /// Student-t rescaled to variance `sigma^2`; needs `dof >= 5`.
    StudentT {
        dof: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub family: Family,
    /// `n_i` per client; its length is the client count.
    pub sizes: Vec<usize>,
    /// Feature dimension (ignored by the Chebyshev family, which uses 6).
    pub dim: usize,
    pub sigma: f64,
    pub seed: u64,
    pub noise: Noise,
}

/// `m` scarce clients of size `scarce` followed by `m` rich ones.
pub fn split_sizes(m: usize, scarce: usize, rich: usize) -> Vec<usize> {
    let mut v = vec![scarce; m / 2];
    v.extend(std::iter::repeat_n(rich, m - m / 2));
    v
}

impl ScenarioSpec {
    /// 25 clients of 500 samples, `d = 100`, `sigma = 0.5`.
    pub fn linear_homogeneous(seed: u64) -> Self {
        ScenarioSpec {
            family: Family::LinearHomogeneous,
            sizes: vec![500; 25],
            dim: 100,
            sigma: 0.5,
            seed,
            noise: Noise::Gaussian,
        }
    }

    /// 20 clients, half with 50 samples and half with 500, `d = 100`.
    pub fn heterogeneous(gamma: f64, layout: Layout, seed: u64) -> Self {
        ScenarioSpec {
            family: Family::Heterogeneous { gamma, layout },
            sizes: split_sizes(20, 50, 500),
            dim: 100,
            sigma: 0.5,
            seed,
            noise: Noise::Gaussian,
        }
    }

    /// Same client mix as [`ScenarioSpec::heterogeneous`], rank-`r` covariates.
    pub fn subspace(rank: usize, seed: u64) -> Self {
        ScenarioSpec {
            family: Family::Subspace { rank },
            sizes: split_sizes(20, 50, 500),
            dim: 100,
            sigma: 0.5,
            seed,
            noise: Noise::Gaussian,
        }
    }

    /// 20 clients with `n` grid points each on disjoint intervals.
    pub fn chebyshev(n: usize, seed: u64) -> Self {
        ScenarioSpec {
            family: Family::Chebyshev,
            sizes: vec![n; 20],
            dim: 6,
            sigma: 0.5,
            seed,
            noise: Noise::Gaussian,
        }
    }

    pub fn clients(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::config("scenario needs at least one client"));
        }
        if self.sizes.contains(&0) {
            return Err(Error::config("every client needs at least one sample"));
        }
        if self.dim == 0 {
            return Err(Error::config("feature dimension must be positive"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!(
                "noise scale must be >= 0, got {}",
                self.sigma
            )));
        }
        if let Noise::StudentT { dof } = self.noise {
            if !(dof >= 5.0) {
                return Err(Error::config(format!(
                    "Student-t noise needs at least 5 degrees of freedom, got {dof}"
                )));
            }
        }
        match self.family {
            Family::Heterogeneous { gamma, .. } => {
                if !(gamma >= 0.0 && gamma.is_finite()) {
                    return Err(Error::config(format!("heterogeneity must be >= 0, got {gamma}")));
                }
                if self.clients() < 2 {
                    return Err(Error::config("model heterogeneity needs at least two clients"));
                }
            }
            Family::Subspace { rank } if (rank == 0 || rank > self.dim) => {
                return Err(Error::config(format!(
                    "subspace rank {rank} is outside 1..={}",
                    self.dim
                )));
            }
            _ => {}
        }
        Ok(())
    }

    fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }
}

/// Independent child seed for trial or sweep index `k`.
pub fn split_seed(seed: u64, k: u64) -> u64 {
    // SplitMix64 finalizer over a golden-ratio stride.
    let mut z = seed.wrapping_add(k.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Indices of the data-scarce and data-rich probe clients: the first client
/// and the first client of the second half.
pub fn probe_clients(spec: &ScenarioSpec) -> (usize, usize) {
    (0, spec.clients() / 2)
}

/// Step size recommended for rank-`r` covariates in dimension `d`.
pub fn subspace_eta(base_eta: f64, d: usize, r: usize) -> f64 {
    base_eta * r as f64 / d as f64
}

/// `U_5(x) = 32 x^5 - 32 x^3 + 6 x`.
pub fn chebyshev_u5(x: f64) -> f64 {
    let x2 = x * x;
    x * (6.0 + x2 * (-32.0 + 32.0 * x2))
}

/// Monomial coefficients of `U_5`.
pub fn chebyshev_u5_coefficients() -> DVector<f64> {
    DVector::from_vec(vec![0.0, 6.0, 0.0, -32.0, 0.0, 32.0])
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so that the draw order matches the row layout.
    let mut m = DMatrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = StandardNormal.sample(rng);
        }
    }
    m
}

fn gaussian_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn noise_vector(spec: &ScenarioSpec, rng: &mut impl Rng, n: usize) -> Result<DVector<f64>> {
    Ok(match spec.noise {
        Noise::Gaussian => gaussian_vector(rng, n) * spec.sigma,
        Noise::StudentT { dof } => {
            let t = StudentT::new(dof).map_err(|e| Error::config(format!("Student-t noise: {e}")))?;
            let scale = spec.sigma * ((dof - 2.0) / dof).sqrt();
            DVector::from_fn(n, |_, _| t.sample(rng) * scale)
        }
    })
}

/// Draws fresh noise for a dataset's clients around their true values, from
/// the given seed; used for Monte-Carlo redraws on fixed covariates.
pub fn redraw_noise(ds: &FederatedDataset, noise: Noise, seed: u64) -> Result<FederatedDataset> {
    let spec = ScenarioSpec {
        family: Family::LinearHomogeneous,
        sizes: ds.sizes(),
        dim: 1,
        sigma: ds.sigma(),
        seed,
        noise,
    };
    let mut rng = spec.stream(STREAM_NOISE);
    let mut ys = Vec::with_capacity(ds.num_clients());
    for (i, c) in ds.clients().iter().enumerate() {
        let clean = c
            .true_values()
            .ok_or_else(|| Error::config(format!("client {i} has no true model")))?;
        ys.push(clean + noise_vector(&spec, &mut rng, c.len())?);
    }
    ds.with_responses(ys)
}

fn assemble(
    spec: &ScenarioSpec,
    kernel: KernelSpec,
    covariates: Vec<DMatrix<f64>>,
    thetas: Vec<DVector<f64>>,
    theta_star: DVector<f64>,
) -> Result<FederatedDataset> {
    let mut noise = spec.stream(STREAM_NOISE);
    let mut clients = Vec::with_capacity(covariates.len());
    for (x, theta) in covariates.into_iter().zip(thetas) {
        let n = x.nrows();
        let ds_client = ClientData::new(x, DVector::zeros(n)).with_true_theta(theta);
        clients.push(ds_client);
    }
    // Features are computed by the dataset; responses follow.
    let ds = FederatedDataset::new(kernel, clients, spec.sigma)?;
    let mut ys = Vec::with_capacity(ds.num_clients());
    for c in ds.clients() {
        let clean = c.true_values().expect("generated clients carry true models");
        ys.push(clean + noise_vector(spec, &mut noise, c.len())?);
    }
    Ok(ds.with_responses(ys)?.with_theta_star(theta_star))
}

/// Standard normal covariates, shared `theta* ~ N(0, I_d)`.
pub fn gen_linear_homogeneous(spec: &ScenarioSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut cov = spec.stream(STREAM_COVARIATES);
    let mut models = spec.stream(STREAM_MODELS);
    let theta = gaussian_vector(&mut models, d);
    let xs = spec
        .sizes
        .iter()
        .map(|&n| gaussian_matrix(&mut cov, n, d))
        .collect();
    let thetas = vec![theta.clone(); spec.clients()];
    assemble(spec, KernelSpec::Linear { dim: d }, xs, thetas, theta)
}

/// Homogeneous covariates with client models spread to a maximum pairwise
/// distance of exactly `Gamma` along one random unit direction.
pub fn gen_model_heterogeneous(spec: &ScenarioSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let Family::Heterogeneous { gamma, layout } = spec.family else {
        return Err(Error::config("scenario is not model-heterogeneous"));
    };
    let d = spec.dim;
    let m = spec.clients();
    let mut cov = spec.stream(STREAM_COVARIATES);
    let mut models = spec.stream(STREAM_MODELS);
    let theta = gaussian_vector(&mut models, d);
    let mut u = gaussian_vector(&mut models, d);
    let un = u.norm();
    u /= un;
    let (scarce, rich) = probe_clients(spec);
    let offsets: Vec<f64> = match layout {
        Layout::Symmetric => (0..m)
            .map(|i| if i % 2 == 0 { gamma / 2.0 } else { -gamma / 2.0 })
            .collect(),
        Layout::Anchored => {
            let mut v: Vec<f64> = (0..m)
                .map(|i| if i == scarce || i == rich { 0.0 } else { gamma })
                .collect();
            if v.iter().all(|&o| o == 0.0) {
                // Two clients, both probes: displace the second.
                v[m - 1] = gamma;
            }
            v
        }
    };
    let thetas = offsets.iter().map(|&o| &theta + &u * o).collect();
    let xs = spec
        .sizes
        .iter()
        .map(|&n| gaussian_matrix(&mut cov, n, d))
        .collect();
    assemble(spec, KernelSpec::Linear { dim: d }, xs, thetas, theta)
}

/// Client `i` observes rows `N(0, (d/r) I_{E_i})` for its own random index
/// set `E_i` of size `r`.
pub fn gen_subspace(spec: &ScenarioSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let Family::Subspace { rank } = spec.family else {
        return Err(Error::config("scenario is not a subspace scenario"));
    };
    let d = spec.dim;
    let scale = (d as f64 / rank as f64).sqrt();
    let mut cov = spec.stream(STREAM_COVARIATES);
    let mut models = spec.stream(STREAM_MODELS);
    let theta = gaussian_vector(&mut models, d);
    let mut xs = Vec::with_capacity(spec.clients());
    for &n in &spec.sizes {
        let mut support = index::sample(&mut cov, d, rank).into_vec();
        support.sort_unstable();
        let mut x = DMatrix::zeros(n, d);
        for r in 0..n {
            for &c in &support {
                let z: f64 = StandardNormal.sample(&mut cov);
                x[(r, c)] = z * scale;
            }
        }
        xs.push(x);
    }
    let thetas = vec![theta.clone(); spec.clients()];
    assemble(spec, KernelSpec::Linear { dim: d }, xs, thetas, theta)
}

/// Client `i` of `M` holds grid points `-1 + (2/M)(i + (j + 1/2)/n_i)` in its
/// interval `[-1 + 2i/M, -1 + 2(i+1)/M)`; responses are `U_5(x) + noise`
/// and the kernel is the degree-5 monomial kernel.
pub fn gen_chebyshev(spec: &ScenarioSpec) -> Result<FederatedDataset> {
    spec.validate()?;
    let m = spec.clients() as f64;
    let width = 2.0 / m;
    let xs = spec
        .sizes
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            DMatrix::from_fn(n, 1, |j, _| {
                -1.0 + width * (i as f64 + (j as f64 + 0.5) / n as f64)
            })
        })
        .collect();
    let theta = chebyshev_u5_coefficients();
    let thetas = vec![theta.clone(); spec.clients()];
    assemble(spec, KernelSpec::Monomial { degree: 5 }, xs, thetas, theta)
}

/// Dispatches on the scenario family.
pub fn generate(spec: &ScenarioSpec) -> Result<FederatedDataset> {
    match spec.family {
        Family::LinearHomogeneous => gen_linear_homogeneous(spec),
        Family::Heterogeneous { .. } => gen_model_heterogeneous(spec),
        Family::Subspace { .. } => gen_subspace(spec),
        Family::Chebyshev => gen_chebyshev(spec),
    }
}

/// JSON sidecar written next to the CSV pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    /// `linear:<d>` or `monomial:<p>`.
    pub kernel: String,
    pub sigma: f64,
    pub seed: Option<u64>,
    pub theta_star: Option<Vec<f64>>,
    pub client_thetas: Vec<Option<Vec<f64>>>,
    pub scenario: Option<ScenarioSpec>,
}

fn kernel_tag(k: &KernelSpec) -> Result<String> {
    match k {
        KernelSpec::Linear { dim } => Ok(format!("linear:{dim}")),
        KernelSpec::Monomial { degree } => Ok(format!("monomial:{degree}")),
        other => Err(Error::UnsupportedRepresentation(format!(
            "{other:?} cannot be serialized"
        ))),
    }
}

fn parse_kernel_tag(tag: &str) -> Result<KernelSpec> {
    let (name, arg) = tag
        .split_once(':')
        .ok_or_else(|| Error::Parse(format!("bad kernel tag {tag:?}")))?;
    let v: usize = arg
        .parse()
        .map_err(|_| Error::Parse(format!("bad kernel tag {tag:?}")))?;
    match name {
        "linear" => Ok(KernelSpec::Linear { dim: v }),
        "monomial" => Ok(KernelSpec::Monomial { degree: v }),
        _ => Err(Error::Parse(format!("unknown kernel {name:?}"))),
    }
}

pub const COVARIATES_FILE: &str = "covariates.csv";
pub const RESPONSES_FILE: &str = "responses.csv";
pub const SIDECAR_FILE: &str = "dataset.json";

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Writes `covariates.csv`, `responses.csv` and `dataset.json` into `dir`.
pub fn write_dataset(ds: &FederatedDataset, dir: &Path, scenario: Option<&ScenarioSpec>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = ds.kernel().input_dim();
    let cov_path = dir.join(COVARIATES_FILE);
    let mut w = csv::Writer::from_path(&cov_path).map_err(|e| csv_err(&cov_path, e))?;
    let mut header = vec!["client_id".to_string(), "row_index".to_string()];
    header.extend((1..=p).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(|e| csv_err(&cov_path, e))?;
    for (i, c) in ds.clients().iter().enumerate() {
        for r in 0..c.len() {
            let mut rec = vec![i.to_string(), r.to_string()];
            rec.extend((0..p).map(|k| format!("{:e}", c.covariates()[(r, k)])));
            w.write_record(&rec).map_err(|e| csv_err(&cov_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&cov_path, e))?;

    let y_path = dir.join(RESPONSES_FILE);
    let mut w = csv::Writer::from_path(&y_path).map_err(|e| csv_err(&y_path, e))?;
    w.write_record(["client_id", "row_index", "y"])
        .map_err(|e| csv_err(&y_path, e))?;
    for (i, c) in ds.clients().iter().enumerate() {
        for (r, y) in c.responses().iter().enumerate() {
            w.write_record([i.to_string(), r.to_string(), format!("{y:e}")])
                .map_err(|e| csv_err(&y_path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&y_path, e))?;

    let side = Sidecar {
        kernel: kernel_tag(ds.kernel())?,
        sigma: ds.sigma(),
        seed: scenario.map(|s| s.seed),
        theta_star: ds.theta_star().map(|t| t.iter().copied().collect()),
        client_thetas: ds
            .clients()
            .iter()
            .map(|c| c.true_theta().map(|t| t.iter().copied().collect()))
            .collect(),
        scenario: scenario.cloned(),
    };
    let side_path = dir.join(SIDECAR_FILE);
    let json = serde_json::to_string_pretty(&side).map_err(|e| Error::Parse(e.to_string()))?;
    fs::write(&side_path, json).map_err(|e| Error::io(&side_path, e))
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<FederatedDataset> {
    let side_path = dir.join(SIDECAR_FILE);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: Sidecar =
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", side_path.display())))?;
    let kernel = parse_kernel_tag(&side.kernel)?;
    let p = kernel.input_dim();
    let m = side.client_thetas.len();

    let parse = |path: &Path, s: &str| -> Result<f64> {
        s.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad number {s:?}", path.display())))
    };
    let parse_idx = |path: &Path, s: &str| -> Result<usize> {
        s.trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: bad index {s:?}", path.display())))
    };

    let cov_path = dir.join(COVARIATES_FILE);
    let mut rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); m];
    let mut r = csv::Reader::from_path(&cov_path).map_err(|e| csv_err(&cov_path, e))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&cov_path, e))?;
        if rec.len() != p + 2 {
            return Err(Error::Parse(format!(
                "{}: expected {} fields, got {}",
                cov_path.display(),
                p + 2,
                rec.len()
            )));
        }
        let i = parse_idx(&cov_path, &rec[0])?;
        let j = parse_idx(&cov_path, &rec[1])?;
        if i >= m || j != rows[i].len() {
            return Err(Error::Parse(format!(
                "{}: rows must be grouped by client and in order (client {i}, row {j})",
                cov_path.display()
            )));
        }
        rows[i].push(
            (0..p)
                .map(|k| parse(&cov_path, &rec[k + 2]))
                .collect::<Result<_>>()?,
        );
    }
    let y_path = dir.join(RESPONSES_FILE);
    let mut ys: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut r = csv::Reader::from_path(&y_path).map_err(|e| csv_err(&y_path, e))?;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(&y_path, e))?;
        if rec.len() != 3 {
            return Err(Error::Parse(format!("{}: expected 3 fields", y_path.display())));
        }
        let i = parse_idx(&y_path, &rec[0])?;
        let j = parse_idx(&y_path, &rec[1])?;
        if i >= m || j != ys[i].len() {
            return Err(Error::Parse(format!(
                "{}: rows must be grouped by client and in order (client {i}, row {j})",
                y_path.display()
            )));
        }
        ys[i].push(parse(&y_path, &rec[2])?);
    }
    let mut clients = Vec::with_capacity(m);
    for (i, ((xr, y), t)) in rows.into_iter().zip(ys).zip(side.client_thetas).enumerate() {
        if xr.len() != y.len() {
            return Err(Error::Parse(format!(
                "client {i}: {} covariate rows but {} responses",
                xr.len(),
                y.len()
            )));
        }
        let n = xr.len();
        let x = DMatrix::from_row_iterator(n, p, xr.into_iter().flatten());
        let mut c = ClientData::new(x, DVector::from_vec(y));
        if let Some(t) = t {
            c = c.with_true_theta(DVector::from_vec(t));
        }
        clients.push(c);
    }
    let mut ds = FederatedDataset::new(kernel, clients, side.sigma)?;
    if let Some(t) = side.theta_star {
        ds = ds.with_theta_star(DVector::from_vec(t));
    }
    Ok(ds)
}
