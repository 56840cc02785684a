//! Gram matrices, empirical HSIC and CKA.
//!
//! `hsic(K, L) = tr(K R L R) / (m − 1)²` with the centring matrix
//! `R = I − 11ᵀ/m`. It is evaluated as `Σ_ij (R K R)_ij L_ij`, which costs
//! `O(m²)` once the Gram matrices exist.
//!
//! CKA divides by `sqrt(hsic(K, K) · hsic(L, L))`, which makes the constant
//! prefactor irrelevant and the measure invariant to isotropic scaling for
//! the linear kernel (and for distance kernels whose bandwidth follows the
//! median heuristic).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diff::{center, sq_dists, Tape, Var};
use crate::{CieError, Matrix, Result};

/// How a distance kernel picks its length scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the input, recomputed on every call and
    /// treated as a constant for differentiation.
    Median,
}

impl Bandwidth {
    /// Bandwidth from the squared pairwise distance matrix.
    fn resolve(self, sq: &Matrix) -> f64 {
        match self {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => median_of_sq_dists(sq),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    Linear,
    Polynomial { degree: u32, offset: f64 },
    Rbf { bandwidth: Bandwidth },
    RationalQuadratic { alpha: f64, lengthscale: Bandwidth },
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec::Rbf {
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelSpec {
    pub fn polynomial() -> Self {
        KernelSpec::Polynomial {
            degree: 2,
            offset: 1.0,
        }
    }

    pub fn rbf() -> Self {
        Self::default()
    }

    pub fn rational_quadratic() -> Self {
        KernelSpec::RationalQuadratic {
            alpha: 1.0,
            lengthscale: Bandwidth::Median,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |what: &str, b: Bandwidth| match b {
            Bandwidth::Fixed(s) if !(s > 0.0) => {
                Err(CieError::Parameter(format!("{what} must be positive, got {s}")))
            }
            _ => Ok(()),
        };
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { degree, .. } if degree < 1 => Err(CieError::Parameter(
                "polynomial degree must be at least 1".into(),
            )),
            KernelSpec::Polynomial { .. } => Ok(()),
            KernelSpec::Rbf { bandwidth } => positive("rbf bandwidth", bandwidth),
            KernelSpec::RationalQuadratic { alpha, lengthscale } => {
                if !(alpha > 0.0) {
                    return Err(CieError::Parameter(format!(
                        "rational-quadratic alpha must be positive, got {alpha}"
                    )));
                }
                positive("rational-quadratic lengthscale", lengthscale)
            }
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let bw = |b: &Bandwidth| match b {
            Bandwidth::Fixed(s) => format!("{s}"),
            Bandwidth::Median => "median".to_string(),
        };
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Polynomial { degree, offset } => write!(f, "poly:{degree}:{offset}"),
            KernelSpec::Rbf { bandwidth } => write!(f, "rbf:{}", bw(bandwidth)),
            KernelSpec::RationalQuadratic { alpha, lengthscale } => {
                write!(f, "rq:{alpha}:{}", bw(lengthscale))
            }
        }
    }
}

impl FromStr for KernelSpec {
    type Err = CieError;

    /// Accepts `linear`, `poly[:degree[:offset]]`, `rbf[:sigma|median]` and
    /// `rq[:alpha[:lengthscale|median]]`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split(':');
        let name = parts.next().unwrap_or_default().to_ascii_lowercase();
        let num = |p: Option<&str>, default: f64| -> Result<f64> {
            match p {
                None => Ok(default),
                Some(v) => v
                    .parse()
                    .map_err(|_| CieError::Config(format!("bad number `{v}` in kernel `{s}`"))),
            }
        };
        let bw = |p: Option<&str>| -> Result<Bandwidth> {
            match p {
                None | Some("median") => Ok(Bandwidth::Median),
                Some(v) => v
                    .parse()
                    .map(Bandwidth::Fixed)
                    .map_err(|_| CieError::Config(format!("bad bandwidth `{v}` in kernel `{s}`"))),
            }
        };
        let spec = match name.as_str() {
            "linear" => KernelSpec::Linear,
            "poly" | "polynomial" => KernelSpec::Polynomial {
                degree: num(parts.next(), 2.0)? as u32,
                offset: num(parts.next(), 1.0)?,
            },
            "rbf" => KernelSpec::Rbf {
                bandwidth: bw(parts.next())?,
            },
            "rq" => KernelSpec::RationalQuadratic {
                alpha: num(parts.next(), 1.0)?,
                lengthscale: bw(parts.next())?,
            },
            other => return Err(CieError::Config(format!("unknown kernel `{other}`"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Symmetric `m×m` kernel matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix(pub Matrix);

impl GramMatrix {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

fn check_rows(m: usize) -> Result<()> {
    if m < 2 {
        return Err(CieError::Contract(format!(
            "HSIC needs at least 2 samples, got {m}"
        )));
    }
    Ok(())
}

/// Differentiable Gram matrix of the rows of `x`.
pub fn gram(tape: &mut Tape, kernel: &KernelSpec, x: Var) -> Result<Var> {
    check_rows(tape.shape(x).0)?;
    kernel.validate()?;
    match *kernel {
        KernelSpec::Linear => {
            let xt = tape.transpose(x);
            tape.matmul(x, xt)
        }
        KernelSpec::Polynomial { degree, offset } => {
            let xt = tape.transpose(x);
            let lin = tape.matmul(x, xt)?;
            let shifted = tape.add_scalar(lin, offset);
            tape.powf(shifted, degree as f64)
        }
        KernelSpec::Rbf { bandwidth } => {
            let d = tape.pairwise_sq_dist(x);
            let sigma = bandwidth.resolve(tape.value(d));
            let s = tape.scale(d, -1.0 / (2.0 * sigma * sigma));
            Ok(tape.exp(s))
        }
        KernelSpec::RationalQuadratic { alpha, lengthscale } => {
            let d = tape.pairwise_sq_dist(x);
            let ell = lengthscale.resolve(tape.value(d));
            let s = tape.scale(d, 1.0 / (2.0 * alpha * ell * ell));
            let base = tape.add_scalar(s, 1.0);
            tape.powf(base, -alpha)
        }
    }
}

/// Gram matrix without recording anything.
pub fn gram_matrix(kernel: &KernelSpec, x: &Matrix) -> Result<GramMatrix> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let k = gram(&mut tape, kernel, v)?;
    Ok(GramMatrix(tape.value(k).clone()))
}

/// `R = I_m − 11ᵀ/m`.
pub fn centering_matrix(m: usize) -> Matrix {
    Matrix::eye(m) - Matrix::from_elem((m, m), 1.0 / m as f64)
}

fn check_pair(k: &Matrix, l: &Matrix) -> Result<()> {
    if k.dim() != l.dim() || k.nrows() != k.ncols() {
        return Err(CieError::Dimension {
            op: "hsic",
            left: k.dim(),
            right: l.dim(),
        });
    }
    check_rows(k.nrows())
}

/// Differentiable `tr(K R L R) / (m − 1)²`.
pub fn hsic(tape: &mut Tape, k: Var, l: Var) -> Result<Var> {
    check_pair(tape.value(k), tape.value(l))?;
    // centring both sides keeps the result bitwise symmetric in (K, L)
    let kc = tape.double_center(k)?;
    let lc = tape.double_center(l)?;
    centred_hsic(tape, kc, lc)
}

/// HSIC of already double-centred Gram matrices; `R` is idempotent, so
/// `Σ K̃ ⊙ L̃ = tr(K R L R)`.
fn centred_hsic(tape: &mut Tape, kc: Var, lc: Var) -> Result<Var> {
    let m = tape.shape(kc).0 as f64;
    let prod = tape.hadamard(kc, lc)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, 1.0 / ((m - 1.0) * (m - 1.0))))
}

/// Plain-value HSIC.
pub fn hsic_value(k: &GramMatrix, l: &GramMatrix) -> Result<f64> {
    check_pair(&k.0, &l.0)?;
    let m = k.0.nrows() as f64;
    let kc = center(&k.0);
    let lc = center(&l.0);
    Ok((&kc * &lc).sum() / ((m - 1.0) * (m - 1.0)))
}

/// Result of [`cka`]. `degenerate` is set when one side has (numerically)
/// zero self-dependence, e.g. constant features; `value` is then a
/// constant zero.
#[derive(Clone, Copy, Debug)]
pub struct Cka {
    pub value: Var,
    pub degenerate: bool,
}

/// Relative size below which `hsic(K, K)` counts as zero.
const DEGENERATE_TOL: f64 = 1e-12;

fn is_degenerate(self_hsic: f64, gram: &Matrix) -> bool {
    let m = gram.nrows() as f64;
    let scale = gram.iter().map(|x| x * x).sum::<f64>() / ((m - 1.0) * (m - 1.0));
    !(self_hsic > DEGENERATE_TOL * scale)
}

/// Differentiable `hsic(Kx, Ky) / sqrt(hsic(Kx, Kx) · hsic(Ky, Ky))`.
pub fn cka(tape: &mut Tape, x: Var, y: Var, kernel: &KernelSpec) -> Result<Cka> {
    if tape.shape(x).0 != tape.shape(y).0 {
        return Err(CieError::Dimension {
            op: "cka",
            left: tape.shape(x),
            right: tape.shape(y),
        });
    }
    let kx = gram(tape, kernel, x)?;
    let ky = gram(tape, kernel, y)?;
    let kc = tape.double_center(kx)?;
    let lc = tape.double_center(ky)?;
    let hxx = centred_hsic(tape, kc, kc)?;
    let hyy = centred_hsic(tape, lc, lc)?;
    if is_degenerate(tape.scalar_value(hxx), tape.value(kx))
        || is_degenerate(tape.scalar_value(hyy), tape.value(ky))
    {
        return Ok(Cka {
            value: tape.scalar(0.0),
            degenerate: true,
        });
    }
    let hxy = centred_hsic(tape, kc, lc)?;
    let denom = tape.hadamard(hxx, hyy)?;
    let inv = tape.powf(denom, -0.5)?;
    Ok(Cka {
        value: tape.hadamard(hxy, inv)?,
        degenerate: false,
    })
}

/// Plain-value CKA; returns `(value, degenerate)`.
pub fn cka_value(x: &Matrix, y: &Matrix, kernel: &KernelSpec) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let (vx, vy) = (tape.leaf(x.clone()), tape.leaf(y.clone()));
    let c = cka(&mut tape, vx, vy, kernel)?;
    Ok((tape.scalar_value(c.value), c.degenerate))
}

/// Median Euclidean distance over distinct row pairs; 1 when that median
/// is zero.
pub fn median_heuristic_bandwidth(x: &Matrix) -> f64 {
    median_of_sq_dists(&sq_dists(x))
}

fn median_of_sq_dists(d: &Matrix) -> f64 {
    let m = d.nrows();
    if m < 2 {
        return 1.0;
    }
    let mut dists: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            dists.push(d[[i, j]]);
        }
    }
    // the square root is monotone, so select on squared distances
    let n = dists.len();
    let (lower, &mut upper, _) = dists.select_nth_unstable_by(n / 2, f64::total_cmp);
    let median = if n % 2 == 1 {
        upper.sqrt()
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below.sqrt() + upper.sqrt())
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}
