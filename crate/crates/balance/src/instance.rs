//! Input data model: validated vector instances, JSON I/O, and synthetic
//! generators.
//!
//! An instance is a `d x n` real matrix whose columns are the input
//! vectors, together with the norm regime the columns were validated
//! against. Instances are immutable after construction, so they can be
//! shared freely across concurrent trials.

use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack allowed on column-norm validation. Inputs are either
/// exact or generated; the tolerance only covers serialization rounding.
pub const NORM_TOL: f64 = 1e-12;

/// Zero-sum validation: `||sum v_j||_2 <= ZERO_SUM_TOL * n`.
pub const ZERO_SUM_TOL: f64 = 1e-9;

/// Which per-column norm budget the instance was validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormMode {
    #[serde(rename = "L2_UNIT")]
    L2Unit,
    #[serde(rename = "LINF_UNIT")]
    LinfUnit,
}

impl fmt::Display for NormMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NormMode::L2Unit => write!(f, "L2_UNIT"),
            NormMode::LinfUnit => write!(f, "LINF_UNIT"),
        }
    }
}

#[derive(Debug, Error)]
pub enum InstanceError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed instance file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("column {col} has {mode} norm {value} exceeding the unit budget")]
    NormViolation {
        col: usize,
        mode: NormMode,
        value: f64,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero_sum is set but the column sum has norm {0:e}")]
    ZeroSumViolation(f64),
    #[error("d = {0} is not a power of two")]
    NotPowerOfTwo(usize),
}

/// A validated input: `d x n` matrix `A` whose `j`-th column is `v_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorInstance {
    d: usize,
    n: usize,
    a: DMatrix<f64>,
    norm_mode: NormMode,
    zero_sum: bool,
}

/// On-disk JSON schema. Columns are column-major: `columns[j][i] = A[i][j]`.
#[derive(Serialize, Deserialize)]
struct InstanceFile {
    d: usize,
    n: usize,
    norm_mode: NormMode,
    #[serde(default)]
    zero_sum: bool,
    columns: Vec<Vec<f64>>,
}

impl VectorInstance {
    /// Validates and wraps a `d x n` matrix.
    pub fn new(a: DMatrix<f64>, norm_mode: NormMode, zero_sum: bool) -> Result<Self, InstanceError> {
        let d = a.nrows();
        let n = a.ncols();
        if d == 0 || n == 0 {
            return Err(InstanceError::DimensionMismatch(format!(
                "d and n must be >= 1, got d={d}, n={n}"
            )));
        }
        for j in 0..n {
            let col = a.column(j);
            let value = match norm_mode {
                NormMode::L2Unit => col.norm(),
                NormMode::LinfUnit => col.amax(),
            };
            if value > 1.0 + NORM_TOL {
                return Err(InstanceError::NormViolation {
                    col: j,
                    mode: norm_mode,
                    value,
                });
            }
        }
        if zero_sum {
            let mut sum = DVector::zeros(d);
            for j in 0..n {
                sum += a.column(j);
            }
            let norm = sum.norm();
            if norm > ZERO_SUM_TOL * n as f64 {
                return Err(InstanceError::ZeroSumViolation(norm));
            }
        }
        Ok(Self {
            d,
            n,
            a,
            norm_mode,
            zero_sum,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The full `d x n` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.a.column(j).into_owned()
    }

    pub fn norm_mode(&self) -> NormMode {
        self.norm_mode
    }

    pub fn zero_sum(&self) -> bool {
        self.zero_sum
    }

    /// Builds a sub-instance from a subset of columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Self, InstanceError> {
        let mut a = DMatrix::zeros(self.d, cols.len());
        for (k, &j) in cols.iter().enumerate() {
            a.set_column(k, &self.a.column(j));
        }
        VectorInstance::new(a, self.norm_mode, false)
    }
}

/// Loads and validates a JSON instance file.
pub fn load_instance(path: &Path) -> Result<VectorInstance, InstanceError> {
    let text = std::fs::read_to_string(path).map_err(|source| InstanceError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let file: InstanceFile = serde_json::from_str(&text)?;
    if file.columns.len() != file.n {
        return Err(InstanceError::DimensionMismatch(format!(
            "declared n={} but found {} columns",
            file.n,
            file.columns.len()
        )));
    }
    for (j, col) in file.columns.iter().enumerate() {
        if col.len() != file.d {
            return Err(InstanceError::DimensionMismatch(format!(
                "column {j} has length {} but d={}",
                col.len(),
                file.d
            )));
        }
    }
    let a = DMatrix::from_fn(file.d, file.n, |i, j| file.columns[j][i]);
    VectorInstance::new(a, file.norm_mode, file.zero_sum)
}

/// Writes the instance as JSON. Round-trips bitwise on the matrix payload.
pub fn save_instance(inst: &VectorInstance, path: &Path) -> Result<(), InstanceError> {
    let file = InstanceFile {
        d: inst.d,
        n: inst.n,
        norm_mode: inst.norm_mode,
        zero_sum: inst.zero_sum,
        columns: (0..inst.n)
            .map(|j| inst.a.column(j).iter().copied().collect())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&file)?;
    std::fs::write(path, text).map_err(|source| InstanceError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Seeded random instance. `L2Unit` columns are uniform on the unit
/// sphere; `LinfUnit` columns have i.i.d. uniform `[-1, 1]` entries.
pub fn generate_random(n: usize, d: usize, norm_mode: NormMode, seed: u64) -> VectorInstance {
    assert!(n >= 1 && d >= 1, "n and d must be >= 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = DMatrix::zeros(d, n);
    for j in 0..n {
        match norm_mode {
            NormMode::L2Unit => loop {
                let v = DVector::from_fn(d, |_, _| standard_normal(&mut rng));
                let norm = v.norm();
                if norm > 1e-12 {
                    a.set_column(j, &(v / norm));
                    break;
                }
            },
            NormMode::LinfUnit => {
                let v = DVector::from_fn(d, |_, _| rng.random_range(-1.0..=1.0));
                a.set_column(j, &v);
            }
        }
    }
    VectorInstance::new(a, norm_mode, false).expect("generated instance is valid")
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms per call.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// The `d` columns of the Sylvester Hadamard matrix `H_d`, entries `+-1`.
/// A hard instance for the `linf`-bounded regime.
pub fn generate_hadamard_like(d: usize) -> Result<VectorInstance, InstanceError> {
    if d == 0 || !d.is_power_of_two() {
        return Err(InstanceError::NotPowerOfTwo(d));
    }
    let mut h = DMatrix::from_element(1, 1, 1.0);
    let mut k = 1;
    while k < d {
        let mut next = DMatrix::zeros(2 * k, 2 * k);
        for i in 0..k {
            for j in 0..k {
                let v = h[(i, j)];
                next[(i, j)] = v;
                next[(i, j + k)] = v;
                next[(i + k, j)] = v;
                next[(i + k, j + k)] = -v;
            }
        }
        h = next;
        k *= 2;
    }
    VectorInstance::new(h, NormMode::LinfUnit, false)
}

/// Appends the minimal number of norm-feasible columns so the column sum
/// is zero: `-sum` is split into `ceil(||sum||)` equal pieces, where the
/// norm is the instance's own budget norm. Inputs already within the
/// zero-sum tolerance are returned unchanged apart from the flag.
pub fn balance_to_zero_sum(inst: &VectorInstance) -> VectorInstance {
    let d = inst.d();
    let n = inst.n();
    let mut sum = DVector::zeros(d);
    for j in 0..n {
        sum += inst.matrix().column(j);
    }
    let l2 = sum.norm();
    if l2 <= ZERO_SUM_TOL * n as f64 {
        return VectorInstance::new(inst.matrix().clone(), inst.norm_mode(), true)
            .expect("already balanced instance stays valid");
    }
    let budget_norm = match inst.norm_mode() {
        NormMode::L2Unit => l2,
        NormMode::LinfUnit => sum.amax(),
    };
    let pieces = budget_norm.ceil().max(1.0) as usize;
    let piece = -&sum / pieces as f64;
    let mut a = DMatrix::zeros(d, n + pieces);
    a.view_mut((0, 0), (d, n)).copy_from(inst.matrix());
    for k in 0..pieces {
        a.set_column(n + k, &piece);
    }
    VectorInstance::new(a, inst.norm_mode(), true).expect("balanced instance is valid")
}
