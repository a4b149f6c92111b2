//! Offline trajectory-data collection and the Hankel-matrix machinery that
//! turns it into a non-parametric representation of the platoon behavior.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_util;
use crate::vehicle::{
    equilibrium_spacing, equilibrium_state, ovm_acceleration, step, OvmParams, PlatoonConfig,
};

/// Gain of the clipped random walk driving the head vehicle during
/// collection; bounds the head acceleration by the same factor.
const WALK_GAIN: f64 = 2.0;

/// How a dataset is to be collected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectionSpec {
    /// Equilibrium velocity the data is collected around (m/s).
    pub v_star: f64,
    /// Number of samples T.
    pub samples: usize,
    /// Half-width of the excitation on CAV accelerations and on the
    /// head-vehicle velocity error (m/s² and m/s respectively).
    pub excitation: f64,
    pub seed: u64,
    /// Keep the HDV acceleration noise active while collecting.
    pub hdv_noise: bool,
    /// Past horizon the data will be used with, for the length check.
    pub tini: usize,
    /// Future horizon the data will be used with, for the length check.
    pub horizon: usize,
}

/// Minimum data length for a combined input of `m + 1` channels to be
/// persistently exciting of order `tini + horizon + 2n`.
pub fn minimum_data_length(m: usize, tini: usize, horizon: usize, n: usize) -> usize {
    (m + 1) * (tini + horizon + 2 * n) - 1
}

/// Pre-collected input/output samples of one platoon.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    /// CAV acceleration samples, one row per CAV, `T` columns.
    pub u_d: DMatrix<f64>,
    /// Head-vehicle velocity error samples.
    pub eps_d: DVector<f64>,
    /// Output samples (velocity errors then CAV spacing errors), `T` columns.
    pub y_d: DMatrix<f64>,
    pub dt: f64,
    pub n: usize,
    pub cav_set: Vec<usize>,
    /// Equilibrium velocity used at collection (m/s).
    pub v_star: f64,
    /// Designed CAV equilibrium spacing used at collection (m).
    pub cav_eq_spacing: f64,
    pub seed: u64,
}

impl TrajectoryDataset {
    pub fn samples(&self) -> usize {
        self.eps_d.len()
    }

    pub fn m(&self) -> usize {
        self.u_d.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.y_d.nrows()
    }

    /// Combined input sequence with the head-vehicle channel first.
    pub fn combined_input(&self) -> DMatrix<f64> {
        let t = self.samples();
        let mut out = DMatrix::zeros(1 + self.m(), t);
        out.row_mut(0).copy_from(&self.eps_d.transpose());
        out.view_mut((1, 0), (self.m(), t)).copy_from(&self.u_d);
        out
    }
}

/// Block Hankel matrix of a multichannel signal: block row `r`, column `c`
/// holds sample `r + c`. Output is `(q * order) x (T - order + 1)`.
pub fn hankel(sequence: &DMatrix<f64>, order: usize) -> Result<DMatrix<f64>> {
    let q = sequence.nrows();
    let t = sequence.ncols();
    if order == 0 {
        return Err(Error::InvalidConfig("Hankel order must be at least 1".into()));
    }
    if order > t {
        return Err(Error::InsufficientData {
            required: order,
            actual: t,
        });
    }
    let cols = t - order + 1;
    let mut out = DMatrix::zeros(q * order, cols);
    for r in 0..order {
        for c in 0..cols {
            for ch in 0..q {
                out[(r * q + ch, c)] = sequence[(ch, r + c)];
            }
        }
    }
    Ok(out)
}

/// Outcome of a persistent-excitation test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationReport {
    pub verdict: bool,
    pub rank: usize,
    pub required_rank: usize,
    pub sigma_min: f64,
    pub reason: Option<String>,
}

/// Check persistent excitation of the given order: the order-`order` block
/// Hankel matrix of the signal must have full row rank.
pub fn is_persistently_exciting(sequence: &DMatrix<f64>, order: usize) -> ExcitationReport {
    let q = sequence.nrows();
    let t = sequence.ncols();
    let required_rank = q * order;
    let fail = |reason: &str| ExcitationReport {
        verdict: false,
        rank: 0,
        required_rank,
        sigma_min: 0.0,
        reason: Some(reason.to_string()),
    };
    if order > t {
        return fail("signal shorter than the requested order");
    }
    if t - order + 1 < required_rank {
        return fail("insufficient length: fewer Hankel columns than rows");
    }
    let h = hankel(sequence, order).expect("dimensions checked above");
    let svd = h.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let sigma1 = sv.first().copied().unwrap_or(0.0);
    let tol = (h.nrows().max(h.ncols()) as f64) * sigma1 * 1e-10;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    ExcitationReport {
        verdict: rank == required_rank,
        rank,
        required_rank,
        sigma_min: sv.last().copied().unwrap_or(0.0),
        reason: None,
    }
}

/// Collect a dataset by exciting the nonlinear platoon around the
/// equilibrium of `spec.v_star`.
///
/// The CAVs drive with a car-following feedback (shifted so it vanishes at
/// the designed CAV spacing) plus i.i.d. uniform exploration noise, and the
/// recorded input is the total applied acceleration. The head vehicle's
/// velocity error follows a clipped random walk of the same amplitude, so
/// its acceleration stays bounded; the realized error sequence is recorded.
pub fn collect_dataset(cfg: &PlatoonConfig, spec: &CollectionSpec) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let m = cfg.m();
    if m == 0 {
        return Err(Error::InvalidConfig(
            "data collection requires at least one CAV".into(),
        ));
    }
    let required = minimum_data_length(m, spec.tini, spec.horizon, cfg.n);
    if spec.samples < required {
        return Err(Error::InsufficientData {
            required,
            actual: spec.samples,
        });
    }

    let mut sim_cfg = cfg.clone();
    if !spec.hdv_noise {
        sim_cfg.noise_amplitude = 0.0;
    }

    let mut rng_exc = ChaCha12Rng::seed_from_u64(spec.seed);
    let mut rng_noise = ChaCha12Rng::seed_from_u64(spec.seed ^ 0x9E37_79B9_7F4A_7C15);

    // Per-CAV feedback law: the vehicle's own (or nominal) car-following
    // parameters with the spacing argument shifted so the designed CAV
    // equilibrium spacing is a fixed point at v_star.
    let mut cav_laws: Vec<(OvmParams, f64)> = Vec::with_capacity(m);
    for &i in &cfg.cav_set {
        let params = cfg.hdv_params.get(&i).copied().unwrap_or(OvmParams::nominal());
        let shift = cfg.cav_eq_spacing - equilibrium_spacing(spec.v_star, &params)?;
        cav_laws.push((params, shift));
    }

    let t_total = spec.samples;
    let mut u_d = DMatrix::zeros(m, t_total);
    let mut eps_d = DVector::zeros(t_total);
    let mut y_d = DMatrix::zeros(cfg.n + m, t_total);

    let mut state = equilibrium_state(&sim_cfg, spec.v_star)?;
    let substeps = sim_cfg.substeps_per_control();
    let mut head_err = 0.0f64;

    for k in 0..t_total {
        eps_d[k] = state.velocities[0] - spec.v_star;
        for i in 1..=cfg.n {
            y_d[(i - 1, k)] = state.velocities[i] - spec.v_star;
        }
        for (j, &i) in cfg.cav_set.iter().enumerate() {
            y_d[(cfg.n + j, k)] = state.spacing(i) - cfg.cav_eq_spacing;
        }

        let mut inputs = Vec::with_capacity(m);
        for (j, &i) in cfg.cav_set.iter().enumerate() {
            let (law, shift) = &cav_laws[j];
            let s = state.spacing(i);
            let s_dot = state.velocities[i - 1] - state.velocities[i];
            let base = ovm_acceleration(s - shift, s_dot, state.velocities[i], law);
            let noise = if spec.excitation > 0.0 {
                rng_exc.random_range(-spec.excitation..=spec.excitation)
            } else {
                0.0
            };
            inputs.push(base + noise);
        }
        for (j, _) in cfg.cav_set.iter().enumerate() {
            u_d[(j, k)] = inputs[j];
        }

        // Next head-velocity target from the clipped random walk.
        let walk_step = if spec.excitation > 0.0 {
            rng_exc.random_range(-spec.excitation..=spec.excitation) * sim_cfg.dt_control * WALK_GAIN
        } else {
            0.0
        };
        let next_err = (head_err + walk_step).clamp(-spec.excitation, spec.excitation);
        let v0_now = state.velocities[0];
        let v0_next = spec.v_star + next_err;

        for sub in 0..substeps {
            let frac = (sub + 1) as f64 / substeps as f64;
            let v_target = v0_now + frac * (v0_next - v0_now);
            let head_accel = (v_target - state.velocities[0]) / sim_cfg.dt_sim;
            state = step(&state, &inputs, head_accel, &sim_cfg, &mut rng_noise).map_err(|e| match e {
                Error::Collision { time, vehicle } => Error::InvalidConfig(format!(
                    "collision during data collection at t = {time:.2} s (vehicle {vehicle}, seed {}); \
                     reduce the excitation or change the seed",
                    spec.seed
                )),
                other => other,
            })?;
        }
        head_err = state.velocities[0] - spec.v_star;
    }

    Ok(TrajectoryDataset {
        u_d,
        eps_d,
        y_d,
        dt: sim_cfg.dt_control,
        n: cfg.n,
        cav_set: cfg.cav_set.clone(),
        v_star: spec.v_star,
        cav_eq_spacing: cfg.cav_eq_spacing,
        seed: spec.seed,
    })
}

/// Past/future partition of the data Hankel matrices. `up/ep/yp` hold the
/// first `tini` block rows, `uf/ef/yf` the last `horizon` block rows, and
/// every matrix has `L = T - tini - horizon + 1` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelBlocks {
    pub up: DMatrix<f64>,
    pub uf: DMatrix<f64>,
    pub ep: DMatrix<f64>,
    pub ef: DMatrix<f64>,
    pub yp: DMatrix<f64>,
    pub yf: DMatrix<f64>,
    pub tini: usize,
    pub horizon: usize,
    /// Number of CAV input channels.
    pub m: usize,
    /// Number of output channels.
    pub output_dim: usize,
}

impl HankelBlocks {
    pub fn columns(&self) -> usize {
        self.up.ncols()
    }
}

/// Split the dataset into the six past/future Hankel blocks.
pub fn partition(ds: &TrajectoryDataset, tini: usize, horizon: usize) -> Result<HankelBlocks> {
    if tini == 0 || horizon == 0 {
        return Err(Error::InvalidConfig("horizons must be at least 1".into()));
    }
    let depth = tini + horizon;
    if ds.samples() < depth {
        return Err(Error::InsufficientData {
            required: depth,
            actual: ds.samples(),
        });
    }
    let m = ds.m();
    let p = ds.output_dim();
    let eps_row = DMatrix::from_rows(&[ds.eps_d.transpose()]);

    let hu = hankel(&ds.u_d, depth)?;
    let he = hankel(&eps_row, depth)?;
    let hy = hankel(&ds.y_d, depth)?;
    let cols = hu.ncols();

    Ok(HankelBlocks {
        up: hu.view((0, 0), (m * tini, cols)).into_owned(),
        uf: hu.view((m * tini, 0), (m * horizon, cols)).into_owned(),
        ep: he.view((0, 0), (tini, cols)).into_owned(),
        ef: he.view((tini, 0), (horizon, cols)).into_owned(),
        yp: hy.view((0, 0), (p * tini, cols)).into_owned(),
        yf: hy.view((p * tini, 0), (p * horizon, cols)).into_owned(),
        tini,
        horizon,
        m,
        output_dim: p,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    schema_version: u32,
    n: usize,
    m: usize,
    cav_set: Vec<usize>,
    dt: f64,
    samples: usize,
    v_star: f64,
    cav_eq_spacing: f64,
    seed: u64,
}

impl TrajectoryDataset {
    /// Write `dataset.csv` and `dataset.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = DatasetMeta {
            schema_version: 1,
            n: self.n,
            m: self.m(),
            cav_set: self.cav_set.clone(),
            dt: self.dt,
            samples: self.samples(),
            v_star: self.v_star,
            cav_eq_spacing: self.cav_eq_spacing,
            seed: self.seed,
        };
        let json = serde_json::to_string_pretty(&meta)
            .map_err(|e| Error::Io(format!("sidecar serialization: {e}")))?;
        io_util::write_atomic(&dir.join("dataset.json"), json.as_bytes())?;

        let mut csv = String::from("k");
        for j in 1..=self.m() {
            let _ = write!(csv, ",u_{j}");
        }
        csv.push_str(",eps");
        for j in 1..=self.output_dim() {
            let _ = write!(csv, ",y_{j}");
        }
        csv.push('\n');
        for k in 0..self.samples() {
            let _ = write!(csv, "{k}");
            for j in 0..self.m() {
                let _ = write!(csv, ",{}", self.u_d[(j, k)]);
            }
            let _ = write!(csv, ",{}", self.eps_d[k]);
            for j in 0..self.output_dim() {
                let _ = write!(csv, ",{}", self.y_d[(j, k)]);
            }
            csv.push('\n');
        }
        io_util::write_atomic(&dir.join("dataset.csv"), csv.as_bytes())
    }

    /// Load a dataset previously written by [`TrajectoryDataset::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("dataset.json");
        let meta_raw = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Io(format!("{}: {e}", meta_path.display())))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_raw)
            .map_err(|e| Error::Io(format!("{}: {e}", meta_path.display())))?;

        let csv_path = dir.join("dataset.csv");
        let raw = fs::read_to_string(&csv_path)
            .map_err(|e| Error::Io(format!("{}: {e}", csv_path.display())))?;
        let mut lines = raw.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Io(format!("{}: empty file", csv_path.display())))?;
        let expected_cols = 1 + meta.m + 1 + (meta.n + meta.m);
        if header.split(',').count() != expected_cols {
            return Err(Error::DimensionMismatch(format!(
                "dataset CSV has {} columns, sidecar implies {}",
                header.split(',').count(),
                expected_cols
            )));
        }

        let mut u_d = DMatrix::zeros(meta.m, meta.samples);
        let mut eps_d = DVector::zeros(meta.samples);
        let mut y_d = DMatrix::zeros(meta.n + meta.m, meta.samples);
        let mut count = 0usize;
        for line in lines {
            if line.trim().is_empty() {
                continue;
            }
            let k = count;
            if k >= meta.samples {
                return Err(Error::DimensionMismatch(format!(
                    "dataset CSV has more rows than the sidecar's {} samples",
                    meta.samples
                )));
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != expected_cols {
                return Err(Error::Io(format!(
                    "{}: row {k} has {} fields, expected {expected_cols}",
                    csv_path.display(),
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| Error::Io(format!("{}: row {k}: {e}", csv_path.display())))
            };
            for j in 0..meta.m {
                u_d[(j, k)] = parse(fields[1 + j])?;
            }
            eps_d[k] = parse(fields[1 + meta.m])?;
            for j in 0..meta.n + meta.m {
                y_d[(j, k)] = parse(fields[2 + meta.m + j])?;
            }
            count += 1;
        }
        if count != meta.samples {
            return Err(Error::DimensionMismatch(format!(
                "dataset CSV has {count} rows, sidecar says {}",
                meta.samples
            )));
        }

        Ok(TrajectoryDataset {
            u_d,
            eps_d,
            y_d,
            dt: meta.dt,
            n: meta.n,
            cav_set: meta.cav_set,
            v_star: meta.v_star,
            cav_eq_spacing: meta.cav_eq_spacing,
            seed: meta.seed,
        })
    }
}
