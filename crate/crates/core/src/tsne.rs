//! Exact t-SNE for projecting embeddings to two dimensions.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::Grid;

#[derive(Debug, Error, PartialEq)]
pub enum TsneError {
    #[error("t-SNE needs at least {needed} points, got {got}")]
    TooFewPoints { got: usize, needed: usize },
    #[error("perplexity {perplexity} is infeasible for {points} points ({reason})")]
    InfeasiblePerplexity {
        perplexity: f64,
        points: usize,
        reason: &'static str,
    },
    #[error("distance grid must be square with a zero diagonal, got {rows}x{cols}")]
    BadDistances { rows: usize, cols: usize },
    #[error("iterations must be at least 1")]
    NoIterations,
    #[error("embedding contains non-finite values")]
    NonFinite,
}

pub const MIN_POINTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub momentum: f64,
    pub final_momentum: f64,
    /// Iteration from which `final_momentum` applies.
    pub momentum_switch: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 1000,
            learning_rate: 100.0,
            early_exaggeration: 4.0,
            exaggeration_iterations: 100,
            momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            init_std: 1e-4,
            seed: 0,
        }
    }
}

impl TsneConfig {
    /// Requires `perplexity < (M − 1)/3` and at least one iteration.
    pub fn validate(&self, points: usize) -> Result<(), TsneError> {
        if points < MIN_POINTS {
            return Err(TsneError::TooFewPoints {
                got: points,
                needed: MIN_POINTS,
            });
        }
        if self.iterations == 0 {
            return Err(TsneError::NoIterations);
        }
        if !(self.perplexity >= 1.0 && self.perplexity < (points as f64 - 1.0) / 3.0) {
            return Err(TsneError::InfeasiblePerplexity {
                perplexity: self.perplexity,
                points,
                reason: "must lie in [1, (M - 1)/3)",
            });
        }
        Ok(())
    }
}

/// Pairwise squared Euclidean distances between the rows of `points`.
pub fn squared_distances(points: &Grid) -> Grid {
    let m = points.rows();
    let mut d = Grid::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let v: f64 = points
                .row(i)
                .iter()
                .zip(points.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d.set(i, j, v);
            d.set(j, i, v);
        }
    }
    d
}

const SIGMA_SEARCH_STEPS: usize = 50;
const ENTROPY_TOLERANCE: f64 = 1e-5;

/// Conditional affinities and Shannon entropy (bits) of one row at
/// precision `beta = 1/(2σ²)`. Distances are shifted by the row minimum so
/// the nearest neighbour always has weight 1.
fn row_affinities(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let dmin = d
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&dj, o)) in d.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *o = 0.0;
            continue;
        }
        let shifted = dj - dmin;
        let w = (-beta * shifted).exp();
        *o = w;
        sum += w;
        weighted += w * shifted;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln() + beta * weighted / sum) / std::f64::consts::LN_2
}

/// Row-wise binary search on σ so that each conditional distribution
/// `P(·|i)` has entropy `log2(perplexity)`. Rows sum to 1, diagonal is 0.
pub fn calibrate_perplexity(d2: &Grid, perplexity: f64) -> Result<Grid, TsneError> {
    let (rows, cols) = d2.shape();
    if rows != cols || (0..rows).any(|i| d2.get(i, i) != 0.0) {
        return Err(TsneError::BadDistances { rows, cols });
    }
    if rows < 2 || !(perplexity >= 1.0 && perplexity <= (rows - 1) as f64) {
        return Err(TsneError::InfeasiblePerplexity {
            perplexity,
            points: rows,
            reason: "must lie in [1, M - 1]",
        });
    }
    let target = perplexity.log2();
    let mut p = Grid::zeros(rows, rows);
    let mut row = vec![0.0; rows];
    for i in 0..rows {
        let d = d2.row(i);
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        for _ in 0..SIGMA_SEARCH_STEPS {
            let h = row_affinities(d, i, beta, &mut row);
            if (h - target).abs() < ENTROPY_TOLERANCE {
                break;
            }
            // entropy falls as precision rises
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { 0.5 * (beta + hi) } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = 0.5 * (beta + lo);
            }
        }
        row_affinities(d, i, beta, &mut row);
        for (j, &v) in row.iter().enumerate() {
            p.set(i, j, v);
        }
    }
    Ok(p)
}

/// Joint affinities `p_ij = (P(j|i) + P(i|j)) / 2M`.
pub fn symmetrize(conditional: &Grid) -> Grid {
    let m = conditional.rows();
    let mut p = Grid::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            p.set(i, j, (conditional.get(i, j) + conditional.get(j, i)) / (2 * m) as f64);
        }
    }
    p
}

/// Joint affinities of `points` at the given perplexity.
pub fn joint_affinities(points: &Grid, perplexity: f64) -> Result<Grid, TsneError> {
    Ok(symmetrize(&calibrate_perplexity(&squared_distances(points), perplexity)?))
}

/// Student-t kernel weights `w_ij = 1/(1 + ‖y_i − y_j‖²)` (zero diagonal)
/// and their sum.
fn kernel(y: &[f64]) -> (Vec<f64>, f64) {
    let m = y.len() / 2;
    let mut w = vec![0.0; m * m];
    let mut z = 0.0;
    for i in 0..m {
        for j in (i + 1)..m {
            let dx = y[2 * i] - y[2 * j];
            let dy = y[2 * i + 1] - y[2 * j + 1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            w[i * m + j] = v;
            w[j * m + i] = v;
            z += 2.0 * v;
        }
    }
    (w, z)
}

/// Low-dimensional affinities `q_ij` for a flat `[M, 2]` layout.
pub fn low_dim_affinities(y: &[f64]) -> Grid {
    let m = y.len() / 2;
    let (w, z) = kernel(y);
    Grid::from_vec(m, m, w.into_iter().map(|v| v / z).collect())
}

/// `KL(P ‖ Q)`, terms with `p_ij = 0` contributing nothing.
pub fn kl_divergence(p: &Grid, y: &[f64]) -> f64 {
    let q = low_dim_affinities(y);
    p.data()
        .iter()
        .zip(q.data())
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (s·p_ij − q_ij)(y_i − y_j)(1 + ‖y_i − y_j‖²)^{-1}` with
/// exaggeration factor `s`.
pub fn kl_gradient(p: &Grid, y: &[f64], exaggeration: f64) -> Vec<f64> {
    let m = y.len() / 2;
    let (w, z) = kernel(y);
    let mut grad = vec![0.0; 2 * m];
    for i in 0..m {
        let (mut gx, mut gy) = (0.0, 0.0);
        for j in 0..m {
            if i == j {
                continue;
            }
            let wij = w[i * m + j];
            let coeff = (exaggeration * p.get(i, j) - wij / z) * wij;
            gx += coeff * (y[2 * i] - y[2 * j]);
            gy += coeff * (y[2 * i + 1] - y[2 * j + 1]);
        }
        grad[2 * i] = 4.0 * gx;
        grad[2 * i + 1] = 4.0 * gy;
    }
    grad
}

const MIN_GAIN: f64 = 0.01;

/// Optimizer state, stepped one iteration at a time.
#[derive(Debug, Clone)]
pub struct TsneState {
    p: Grid,
    y: Vec<f64>,
    velocity: Vec<f64>,
    gains: Vec<f64>,
    iteration: usize,
    cfg: TsneConfig,
}

impl TsneState {
    /// Seeded Gaussian initialization with standard deviation `init_std`.
    pub fn new(points: &Grid, cfg: &TsneConfig) -> Result<Self, TsneError> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|_| TsneError::NonFinite)?;
        let y = (0..2 * points.rows()).map(|_| normal.sample(&mut rng)).collect();
        Self::with_init(points, cfg, y)
    }

    /// Starts from a given flat `[M, 2]` layout.
    pub fn with_init(points: &Grid, cfg: &TsneConfig, y: Vec<f64>) -> Result<Self, TsneError> {
        let m = points.rows();
        cfg.validate(m)?;
        assert_eq!(y.len(), 2 * m, "initial layout must be [M, 2]");
        if points.data().iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(TsneError::NonFinite);
        }
        let p = joint_affinities(points, cfg.perplexity)?;
        Ok(Self {
            p,
            y,
            velocity: vec![0.0; 2 * m],
            gains: vec![1.0; 2 * m],
            iteration: 0,
            cfg: cfg.clone(),
        })
    }

    pub fn p(&self) -> &Grid {
        &self.p
    }

    pub fn q(&self) -> Grid {
        low_dim_affinities(&self.y)
    }

    /// Flat `[M, 2]` coordinates.
    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.p, &self.y)
    }

    /// One momentum step with per-coordinate adaptive gains; returns the KL
    /// divergence (un-exaggerated) after the update.
    pub fn step(&mut self) -> f64 {
        let exaggeration = if self.iteration < self.cfg.exaggeration_iterations {
            self.cfg.early_exaggeration
        } else {
            1.0
        };
        let momentum = if self.iteration < self.cfg.momentum_switch {
            self.cfg.momentum
        } else {
            self.cfg.final_momentum
        };
        let grad = kl_gradient(&self.p, &self.y, exaggeration);
        let lr = self.cfg.learning_rate;
        for (((y, v), gain), g) in self.y.iter_mut().zip(&mut self.velocity).zip(&mut self.gains).zip(&grad) {
            // gains grow while the gradient keeps opposing the last update
            *gain = if g * *v < 0.0 { *gain + 0.2 } else { (*gain * 0.8).max(MIN_GAIN) };
            *v = momentum * *v - lr * *gain * g;
            *y += *v;
        }
        // the objective is translation invariant; keep the layout centred
        let m = self.y.len() / 2;
        for axis in 0..2 {
            let mean = (0..m).map(|i| self.y[2 * i + axis]).sum::<f64>() / m as f64;
            for i in 0..m {
                self.y[2 * i + axis] -= mean;
            }
        }
        self.iteration += 1;
        self.kl()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneOutput {
    /// `[M, 2]` coordinates.
    pub coords: Grid,
    /// KL divergence after every iteration.
    pub kl_trace: Vec<f64>,
}

pub fn tsne_embed(points: &Grid, cfg: &TsneConfig) -> Result<TsneOutput, TsneError> {
    let mut state = TsneState::new(points, cfg)?;
    let kl_trace = (0..cfg.iterations).map(|_| state.step()).collect();
    if state.y.iter().any(|v| !v.is_finite()) {
        return Err(TsneError::NonFinite);
    }
    let m = points.rows();
    Ok(TsneOutput {
        coords: Grid::from_vec(m, 2, state.y),
        kl_trace,
    })
}

/// `x,y,class_label` rows.
pub fn points_csv(coords: &Grid, labels: &[String]) -> String {
    let mut out = String::from("x,y,class_label\n");
    for (i, label) in labels.iter().enumerate() {
        let _ = writeln!(out, "{:.8e},{:.8e},{label}", coords.get(i, 0), coords.get(i, 1));
    }
    out
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Scatter plot with one fill colour per class and a legend.
pub fn scatter_svg(coords: &Grid, labels: &[String], title: &str) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 30.0;
    let mut classes: Vec<&str> = Vec::new();
    for l in labels {
        if !classes.contains(&l.as_str()) {
            classes.push(l);
        }
    }
    let xs: Vec<f64> = (0..labels.len()).map(|i| coords.get(i, 0)).collect();
    let ys: Vec<f64> = (0..labels.len()).map(|i| coords.get(i, 1)).collect();
    let range = |v: &[f64]| {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, (hi - lo).max(1e-12))
    };
    let ((x0, xw), (y0, yw)) = (range(&xs), range(&ys));
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
        w = SIZE + 2.0 * PAD + 120.0,
        h = SIZE + 2.0 * PAD,
    );
    for (i, label) in labels.iter().enumerate() {
        let c = classes.iter().position(|&k| k == label).unwrap_or(0);
        let cx = PAD + (xs[i] - x0) / xw * SIZE;
        let cy = PAD + SIZE - (ys[i] - y0) / yw * SIZE;
        let _ = writeln!(
            svg,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"4\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            PALETTE[c % PALETTE.len()]
        );
    }
    for (c, name) in classes.iter().enumerate() {
        let y = PAD + 20.0 * c as f64;
        let x = SIZE + 2.0 * PAD;
        let _ = writeln!(
            svg,
            "<circle cx=\"{x}\" cy=\"{y}\" r=\"5\" fill=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>",
            PALETTE[c % PALETTE.len()],
            x + 10.0,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
