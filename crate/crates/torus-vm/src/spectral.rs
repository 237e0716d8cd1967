//! Real and spectral representations of fields on the unit torus.
//!
//! Nodes sit at `x_ab = (a/n, b/n)` and are stored row-major with `a`
//! (the first coordinate) as the slow index. Spectral tables hold the
//! coefficients of `exp(i 2π k·x)` for `|k|_∞ ≤ k_max`; differentiation
//! multiplies mode `k` by `i ξ_k` with `ξ_k = 2πk`.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DUMP_MAGIC: &[u8; 4] = b"TKF1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    n: usize,
    k_max: usize,
}

impl GridSpec {
    pub fn new(n: usize, k_max: usize) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(Error::InvalidGrid(format!(
                "n = {n} must be a power of two and at least 8"
            )));
        }
        if k_max < 1 || k_max > n / 2 - 1 {
            return Err(Error::InvalidGrid(format!(
                "k_max = {k_max} must lie in [1, {}]",
                n / 2 - 1
            )));
        }
        Ok(Self { n, k_max })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn cell(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn node_count(&self) -> usize {
        self.n * self.n
    }

    pub fn node(&self, a: usize, b: usize) -> [f64; 2] {
        [a as f64 / self.n as f64, b as f64 / self.n as f64]
    }

    /// Iterates `(flat index, position)` over all nodes in storage order.
    pub fn nodes(&self) -> impl Iterator<Item = (usize, [f64; 2])> + '_ {
        (0..self.node_count()).map(move |i| (i, self.node(i / self.n, i % self.n)))
    }

    pub fn side(&self) -> usize {
        2 * self.k_max + 1
    }

    pub fn mode_count(&self) -> usize {
        self.side() * self.side()
    }

    pub fn mode_index(&self, k: [i64; 2]) -> Option<usize> {
        let km = self.k_max as i64;
        if k[0].abs() > km || k[1].abs() > km {
            return None;
        }
        Some(((k[0] + km) as usize) * self.side() + (k[1] + km) as usize)
    }

    pub fn mode(&self, index: usize) -> [i64; 2] {
        let km = self.k_max as i64;
        let s = self.side();
        [(index / s) as i64 - km, (index % s) as i64 - km]
    }

    /// All retained modes in storage order.
    pub fn modes(&self) -> impl Iterator<Item = (usize, [i64; 2])> + '_ {
        (0..self.mode_count()).map(move |i| (i, self.mode(i)))
    }

    fn check(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }
}

/// Angular wavenumber `ξ_k = 2πk`.
pub fn xi(k: [i64; 2]) -> [f64; 2] {
    [2.0 * PI * k[0] as f64, 2.0 * PI * k[1] as f64]
}

pub fn xi_norm(k: [i64; 2]) -> f64 {
    let x = xi(k);
    x[0].hypot(x[1])
}

/// Signed distance of `a - b` folded into `[-1/2, 1/2)`.
pub fn wrap_delta(d: f64) -> f64 {
    d - (d + 0.5).floor()
}

pub fn wrap_unit(x: f64) -> f64 {
    let r = x - x.floor();
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Euclidean distance on the unit torus.
pub fn torus_distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    wrap_delta(a[0] - b[0]).hypot(wrap_delta(a[1] - b[1]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: GridSpec,
    values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: GridSpec,
    values: [Vec<f64>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralScalar {
    grid: GridSpec,
    coeffs: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralVector {
    grid: GridSpec,
    coeffs: [Vec<Complex64>; 2],
}

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

impl ScalarField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: vec![0.0; grid.node_count()] }
    }

    pub fn constant(grid: GridSpec, value: f64) -> Self {
        Self { grid, values: vec![value; grid.node_count()] }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self { grid, values: grid.nodes().map(|(_, x)| f(x)).collect() }
    }

    pub fn from_values(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.node_count() {
            return Err(Error::InvalidInput(format!(
                "expected {} samples, got {}",
                grid.node_count(),
                values.len()
            )));
        }
        check_finite(&values, "scalar field")?;
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn at(&self, a: usize, b: usize) -> f64 {
        let n = self.grid.n;
        self.values[(a % n) * n + (b % n)]
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Grid average of `f²`.
    pub fn mean_square(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>() / self.values.len() as f64
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { grid: self.grid, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn scaled(&self, s: f64) -> Self {
        self.map(|v| s * v)
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &ScalarField) -> Result<Self> {
        self.grid.check(&other.grid)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + s * b).collect();
        Ok(Self { grid: self.grid, values })
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> Result<f64> {
        self.grid.check(&other.grid)?;
        Ok(self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Catmull-Rom bicubic interpolation at an arbitrary point, with gradient.
    pub fn interpolate_with_gradient(&self, x: [f64; 2]) -> (f64, [f64; 2]) {
        bicubic(&self.values, self.grid.n, x)
    }

    pub fn interpolate(&self, x: [f64; 2]) -> f64 {
        self.interpolate_with_gradient(x).0
    }

    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        write_dump(w, self.grid.n, &[&self.values])
    }

    pub fn read_binary(r: &mut impl Read, grid: GridSpec) -> Result<Self> {
        let mut comps = read_dump(r, grid.n, 1)?;
        Self::from_values(grid, comps.remove(0))
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write_csv(w, self.grid, &[&self.values], &["value"])
    }
}

impl VectorField {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, values: [vec![0.0; grid.node_count()], vec![0.0; grid.node_count()]] }
    }

    pub fn constant(grid: GridSpec, value: [f64; 2]) -> Self {
        Self {
            grid,
            values: [vec![value[0]; grid.node_count()], vec![value[1]; grid.node_count()]],
        }
    }

    pub fn from_fn(grid: GridSpec, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        let mut out = Self::zeros(grid);
        for (i, x) in grid.nodes() {
            let v = f(x);
            out.values[0][i] = v[0];
            out.values[1][i] = v[1];
        }
        out
    }

    pub fn from_components(c1: ScalarField, c2: ScalarField) -> Result<Self> {
        c1.grid.check(&c2.grid)?;
        Ok(Self { grid: c1.grid, values: [c1.values, c2.values] })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn component(&self, i: usize) -> ScalarField {
        ScalarField { grid: self.grid, values: self.values[i].clone() }
    }

    pub fn component_values(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn component_values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i]
    }

    pub fn at(&self, a: usize, b: usize) -> [f64; 2] {
        let n = self.grid.n;
        let i = (a % n) * n + (b % n);
        [self.values[0][i], self.values[1][i]]
    }

    pub fn mean(&self) -> [f64; 2] {
        let len = self.grid.node_count() as f64;
        [self.values[0].iter().sum::<f64>() / len, self.values[1].iter().sum::<f64>() / len]
    }

    /// Largest pointwise Euclidean magnitude.
    pub fn sup_norm(&self) -> f64 {
        self.values[0].iter().zip(&self.values[1]).fold(0.0, |m, (a, b)| m.max(a.hypot(*b)))
    }

    pub fn mean_square(&self) -> f64 {
        let len = self.grid.node_count() as f64;
        self.values[0].iter().chain(&self.values[1]).map(|v| v * v).sum::<f64>() / len
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            values: [
                self.values[0].iter().map(|v| s * v).collect(),
                self.values[1].iter().map(|v| s * v).collect(),
            ],
        }
    }

    pub fn axpy(&self, s: f64, other: &VectorField) -> Result<Self> {
        self.grid.check(&other.grid)?;
        let comb = |a: &Vec<f64>, b: &Vec<f64>| a.iter().zip(b).map(|(x, y)| x + s * y).collect();
        Ok(Self {
            grid: self.grid,
            values: [comb(&self.values[0], &other.values[0]), comb(&self.values[1], &other.values[1])],
        })
    }

    /// Largest pointwise Euclidean distance.
    pub fn max_abs_diff(&self, other: &VectorField) -> Result<f64> {
        self.grid.check(&other.grid)?;
        let mut m: f64 = 0.0;
        for i in 0..self.grid.node_count() {
            let d0 = self.values[0][i] - other.values[0][i];
            let d1 = self.values[1][i] - other.values[1][i];
            m = m.max(d0.hypot(d1));
        }
        Ok(m)
    }

    pub fn interpolate(&self, x: [f64; 2]) -> [f64; 2] {
        let n = self.grid.n;
        [bicubic(&self.values[0], n, x).0, bicubic(&self.values[1], n, x).0]
    }

    pub fn write_binary(&self, w: &mut impl Write) -> Result<()> {
        write_dump(w, self.grid.n, &[&self.values[0], &self.values[1]])
    }

    pub fn read_binary(r: &mut impl Read, grid: GridSpec) -> Result<Self> {
        let mut comps = read_dump(r, grid.n, 2)?;
        let c2 = comps.pop().unwrap_or_default();
        let c1 = comps.pop().unwrap_or_default();
        Self::from_components(ScalarField::from_values(grid, c1)?, ScalarField::from_values(grid, c2)?)
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        write_csv(w, self.grid, &[&self.values[0], &self.values[1]], &["value1", "value2"])
    }
}

/// Catmull-Rom weights and their derivatives for offsets -1, 0, 1, 2.
fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let t2 = t * t;
    let t3 = t2 * t;
    let w = [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ];
    let d = [
        0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
        0.5 * (9.0 * t2 - 10.0 * t),
        0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
        0.5 * (3.0 * t2 - 2.0 * t),
    ];
    (w, d)
}

fn write_dump(w: &mut impl Write, n: usize, comps: &[&Vec<f64>]) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(comps.len() as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for i in 0..n * n {
        for c in comps {
            w.write_all(&c[i].to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_dump(r: &mut impl Read, n: usize, components: usize) -> Result<Vec<Vec<f64>>> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != DUMP_MAGIC {
        return Err(Error::InvalidInput("bad field dump magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes([header[i], header[i + 1], header[i + 2], header[i + 3]]);
    if word(4) as usize != n || word(8) as usize != components {
        return Err(Error::InvalidInput(format!(
            "field dump holds n = {}, {} components; expected n = {n}, {components}",
            word(4),
            word(8)
        )));
    }
    let mut out = vec![vec![0.0; n * n]; components];
    let mut buf = [0u8; 8];
    for i in 0..n * n {
        for c in out.iter_mut() {
            r.read_exact(&mut buf)?;
            c[i] = f64::from_le_bytes(buf);
        }
    }
    Ok(out)
}

fn write_csv(w: &mut impl Write, grid: GridSpec, comps: &[&Vec<f64>], names: &[&str]) -> Result<()> {
    write!(w, "x1,x2")?;
    for name in names {
        write!(w, ",{name}")?;
    }
    writeln!(w)?;
    for (i, x) in grid.nodes() {
        write!(w, "{},{}", x[0], x[1])?;
        for c in comps {
            write!(w, ",{}", c[i])?;
        }
        writeln!(w)?;
    }
    Ok(())
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize) -> (Arc<dyn Fft<f64>>, Arc<dyn Fft<f64>>) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    })
}

/// In-place 2D transform over row-major `n × n` data.
fn fft2(data: &mut [Complex64], n: usize, inverse: bool) {
    let (fwd, inv) = plans(n);
    let plan = if inverse { inv } else { fwd };
    for row in data.chunks_mut(n) {
        plan.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for b in 0..n {
        for a in 0..n {
            col[a] = data[a * n + b];
        }
        plan.process(&mut col);
        for a in 0..n {
            data[a * n + b] = col[a];
        }
    }
}

fn forward_table(grid: GridSpec, values: &[f64]) -> Vec<Complex64> {
    let n = grid.n;
    let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2(&mut data, n, false);
    let scale = 1.0 / (n * n) as f64;
    grid.modes()
        .map(|(_, k)| {
            let a = k[0].rem_euclid(n as i64) as usize;
            let b = k[1].rem_euclid(n as i64) as usize;
            data[a * n + b] * scale
        })
        .collect()
}

fn inverse_table(grid: GridSpec, coeffs: &[Complex64]) -> Vec<f64> {
    let n = grid.n;
    let mut data = vec![Complex64::new(0.0, 0.0); n * n];
    for (i, k) in grid.modes() {
        let a = k[0].rem_euclid(n as i64) as usize;
        let b = k[1].rem_euclid(n as i64) as usize;
        data[a * n + b] = coeffs[i];
    }
    fft2(&mut data, n, true);
    data.iter().map(|z| z.re).collect()
}

fn bicubic(values: &[f64], n: usize, x: [f64; 2]) -> (f64, [f64; 2]) {
    let nf = n as f64;
    let u = wrap_unit(x[0]) * nf;
    let w = wrap_unit(x[1]) * nf;
    let a0 = u.floor();
    let b0 = w.floor();
    let (wa, da) = catmull_rom(u - a0);
    let (wb, db) = catmull_rom(w - b0);
    let (a0, b0) = (a0 as usize, b0 as usize);
    let mut val = 0.0;
    let mut g0 = 0.0;
    let mut g1 = 0.0;
    for (i, (wai, dai)) in wa.iter().zip(&da).enumerate() {
        let row = ((a0 + n + i - 1) % n) * n;
        for (j, (wbj, dbj)) in wb.iter().zip(&db).enumerate() {
            let v = values[row + (b0 + n + j - 1) % n];
            val += wai * wbj * v;
            g0 += dai * wbj * v;
            g1 += wai * dbj * v;
        }
    }
    (val, [g0 * nf, g1 * nf])
}

pub fn to_spectral(f: &ScalarField) -> Result<SpectralScalar> {
    check_finite(&f.values, "scalar field")?;
    Ok(SpectralScalar { grid: f.grid, coeffs: forward_table(f.grid, &f.values) })
}

pub fn to_spectral_vector(f: &VectorField) -> Result<SpectralVector> {
    check_finite(&f.values[0], "vector field")?;
    check_finite(&f.values[1], "vector field")?;
    Ok(SpectralVector {
        grid: f.grid,
        coeffs: [forward_table(f.grid, &f.values[0]), forward_table(f.grid, &f.values[1])],
    })
}

pub fn to_real(f: &SpectralScalar) -> ScalarField {
    ScalarField { grid: f.grid, values: inverse_table(f.grid, &f.coeffs) }
}

pub fn to_real_vector(f: &SpectralVector) -> VectorField {
    VectorField {
        grid: f.grid,
        values: [inverse_table(f.grid, &f.coeffs[0]), inverse_table(f.grid, &f.coeffs[1])],
    }
}

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

impl SpectralScalar {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, coeffs: vec![ZERO; grid.mode_count()] }
    }

    pub fn from_coeffs(grid: GridSpec, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != grid.mode_count() {
            return Err(Error::InvalidInput("coefficient table size mismatch".into()));
        }
        if !coeffs.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NonFinite("spectral scalar"));
        }
        Ok(Self { grid, coeffs })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [Complex64] {
        &mut self.coeffs
    }

    /// Coefficient of mode `k`; zero outside the truncation.
    pub fn get(&self, k: [i64; 2]) -> Complex64 {
        self.grid.mode_index(k).map_or(ZERO, |i| self.coeffs[i])
    }

    /// Sets mode `k` and its mirror `-k` to keep the field real.
    pub fn set_real_mode(&mut self, k: [i64; 2], value: Complex64) -> Result<()> {
        let i = self.grid.mode_index(k).ok_or_else(|| Error::InvalidInput(format!("mode {k:?} outside truncation")))?;
        let j = self.grid.mode_index([-k[0], -k[1]]).unwrap_or(i);
        self.coeffs[i] = value;
        self.coeffs[j] = value.conj();
        if i == j {
            self.coeffs[i].im = 0.0;
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.get([0, 0]).re
    }

    /// Sum of |coeff|², equal to the grid mean of f² for band-limited fields.
    pub fn energy(&self) -> f64 {
        self.coeffs.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn hermitian_defect(&self) -> f64 {
        self.grid
            .modes()
            .map(|(i, k)| (self.coeffs[i] - self.get([-k[0], -k[1]]).conj()).norm())
            .fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid, coeffs: self.coeffs.iter().map(|z| z * s).collect() }
    }

    pub fn axpy(&self, s: f64, other: &SpectralScalar) -> Result<Self> {
        self.grid.check(&other.grid)?;
        Ok(Self {
            grid: self.grid,
            coeffs: self.coeffs.iter().zip(&other.coeffs).map(|(a, b)| a + b * s).collect(),
        })
    }

    pub fn map_modes(&self, f: impl Fn([i64; 2], Complex64) -> Complex64) -> Self {
        Self {
            grid: self.grid,
            coeffs: self.grid.modes().map(|(i, k)| f(k, self.coeffs[i])).collect(),
        }
    }

    /// Evaluates the truncated series at an arbitrary point.
    pub fn eval(&self, x: [f64; 2]) -> f64 {
        self.grid
            .modes()
            .map(|(i, k)| {
                let phase = 2.0 * PI * (k[0] as f64 * x[0] + k[1] as f64 * x[1]);
                (self.coeffs[i] * Complex64::from_polar(1.0, phase)).re
            })
            .sum()
    }
}

impl SpectralVector {
    pub fn zeros(grid: GridSpec) -> Self {
        Self { grid, coeffs: [vec![ZERO; grid.mode_count()], vec![ZERO; grid.mode_count()]] }
    }

    pub fn from_components(c1: SpectralScalar, c2: SpectralScalar) -> Result<Self> {
        c1.grid.check(&c2.grid)?;
        Ok(Self { grid: c1.grid, coeffs: [c1.coeffs, c2.coeffs] })
    }

    pub fn grid(&self) -> GridSpec {
        self.grid
    }

    pub fn component(&self, i: usize) -> SpectralScalar {
        SpectralScalar { grid: self.grid, coeffs: self.coeffs[i].clone() }
    }

    pub fn coeffs(&self, i: usize) -> &[Complex64] {
        &self.coeffs[i]
    }

    pub fn coeffs_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.coeffs[i]
    }

    pub fn get(&self, k: [i64; 2]) -> [Complex64; 2] {
        self.grid
            .mode_index(k)
            .map_or([ZERO, ZERO], |i| [self.coeffs[0][i], self.coeffs[1][i]])
    }

    pub fn mean(&self) -> [f64; 2] {
        let z = self.get([0, 0]);
        [z[0].re, z[1].re]
    }

    pub fn energy(&self) -> f64 {
        self.coeffs[0].iter().chain(&self.coeffs[1]).map(|z| z.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            grid: self.grid,
            coeffs: [
                self.coeffs[0].iter().map(|z| z * s).collect(),
                self.coeffs[1].iter().map(|z| z * s).collect(),
            ],
        }
    }

    pub fn axpy(&self, s: f64, other: &SpectralVector) -> Result<Self> {
        self.grid.check(&other.grid)?;
        let comb = |a: &Vec<Complex64>, b: &Vec<Complex64>| a.iter().zip(b).map(|(x, y)| x + y * s).collect();
        Ok(Self {
            grid: self.grid,
            coeffs: [comb(&self.coeffs[0], &other.coeffs[0]), comb(&self.coeffs[1], &other.coeffs[1])],
        })
    }
}

fn ik(k: [i64; 2], axis: usize) -> Complex64 {
    Complex64::new(0.0, xi(k)[axis])
}

pub fn divergence(e: &SpectralVector) -> SpectralScalar {
    SpectralScalar {
        grid: e.grid,
        coeffs: e.grid.modes().map(|(i, k)| ik(k, 0) * e.coeffs[0][i] + ik(k, 1) * e.coeffs[1][i]).collect(),
    }
}

/// `∂₁E₂ − ∂₂E₁`.
pub fn curl_vec(e: &SpectralVector) -> SpectralScalar {
    SpectralScalar {
        grid: e.grid,
        coeffs: e.grid.modes().map(|(i, k)| ik(k, 0) * e.coeffs[1][i] - ik(k, 1) * e.coeffs[0][i]).collect(),
    }
}

/// `(∂₂b, −∂₁b)`.
pub fn curl_scal(b: &SpectralScalar) -> SpectralVector {
    let grid = b.grid;
    SpectralVector {
        grid,
        coeffs: [
            grid.modes().map(|(i, k)| ik(k, 1) * b.coeffs[i]).collect(),
            grid.modes().map(|(i, k)| -ik(k, 0) * b.coeffs[i]).collect(),
        ],
    }
}

pub fn gradient(phi: &SpectralScalar) -> SpectralVector {
    let grid = phi.grid;
    SpectralVector {
        grid,
        coeffs: [
            grid.modes().map(|(i, k)| ik(k, 0) * phi.coeffs[i]).collect(),
            grid.modes().map(|(i, k)| ik(k, 1) * phi.coeffs[i]).collect(),
        ],
    }
}

pub fn laplacian(phi: &SpectralScalar) -> SpectralScalar {
    phi.map_modes(|k, z| z * -(xi_norm(k).powi(2)))
}

/// Zero-mean solution of `Δu = f − mean(f)`.
pub fn inverse_laplacian(f: &SpectralScalar) -> SpectralScalar {
    f.map_modes(|k, z| if k == [0, 0] { ZERO } else { z / -(xi_norm(k).powi(2)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid() -> GridSpec {
        GridSpec::new(32, 8).unwrap()
    }

    fn random_band_limited(grid: GridSpec, seed: u64) -> SpectralScalar {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = SpectralScalar::zeros(grid);
        for (_, k) in grid.modes() {
            if (k[0], k[1]) >= (0, 0) {
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                s.set_real_mode(k, z).unwrap();
            }
        }
        s
    }

    #[test]
    fn grid_validation() {
        assert!(GridSpec::new(12, 2).is_err());
        assert!(GridSpec::new(4, 1).is_err());
        assert!(GridSpec::new(16, 8).is_err());
        assert!(GridSpec::new(16, 0).is_err());
        assert!(GridSpec::new(16, 7).is_ok());
    }

    #[test]
    fn constant_and_single_mode() {
        let g = grid();
        let s = to_spectral(&ScalarField::constant(g, 1.0)).unwrap();
        assert!((s.get([0, 0]) - Complex64::new(1.0, 0.0)).norm() < 1e-14);
        assert!(s.energy() - 1.0 < 1e-14);
        let c = to_spectral(&ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).cos())).unwrap();
        for (i, k) in g.modes() {
            let want = if k == [1, 0] || k == [-1, 0] { 0.5 } else { 0.0 };
            assert!((c.coeffs()[i] - Complex64::new(want, 0.0)).norm() < 1e-14, "{k:?}");
        }
    }

    #[test]
    fn round_trip_and_parseval() {
        let g = grid();
        let s = random_band_limited(g, 3);
        let f = to_real(&s);
        let back = to_spectral(&f).unwrap();
        let err = s.coeffs().iter().zip(back.coeffs()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        let f2 = to_real(&back);
        assert!(f.max_abs_diff(&f2).unwrap() < 1e-12);
        assert!((f.mean_square() - s.energy()).abs() / s.energy() < 1e-12);
        assert!(s.hermitian_defect() < 1e-15);
    }

    #[test]
    fn operator_identities() {
        let g = grid();
        let phi = random_band_limited(g, 5);
        let cg = curl_vec(&gradient(&phi));
        assert!(cg.coeffs().iter().all(|z| z.norm() < 1e-12));
        let dc = divergence(&curl_scal(&phi));
        assert!(dc.coeffs().iter().all(|z| z.norm() < 1e-12));
        let lap = laplacian(&phi);
        let dg = divergence(&gradient(&phi));
        let err = lap.coeffs().iter().zip(dg.coeffs()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9);
        let back = laplacian(&inverse_laplacian(&phi));
        let err = back.axpy(-1.0, &phi).unwrap().coeffs().iter().skip(0).enumerate()
            .filter(|(i, _)| g.mode(*i) != [0, 0])
            .map(|(_, z)| z.norm())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
        let grad_const = gradient(&to_spectral(&ScalarField::constant(g, 3.0)).unwrap());
        assert!(grad_const.energy() < 1e-28);
    }

    #[test]
    fn divergence_single_mode() {
        let g = grid();
        let e = VectorField::from_fn(g, |x| [(2.0 * PI * x[0]).sin() / (2.0 * PI), 0.0]);
        let d = to_real(&divergence(&to_spectral_vector(&e).unwrap()));
        let want = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).cos());
        assert!(d.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn curl_sign_conventions() {
        let g = grid();
        // b = sin(2π x₂): curl_scal b = (2π cos(2π x₂), 0)
        let b = to_spectral(&ScalarField::from_fn(g, |x| (2.0 * PI * x[1]).sin())).unwrap();
        let c = to_real_vector(&curl_scal(&b));
        let want = VectorField::from_fn(g, |x| [2.0 * PI * (2.0 * PI * x[1]).cos(), 0.0]);
        assert!(c.max_abs_diff(&want).unwrap() < 1e-11);
        // E = (0, sin(2π x₁)): curl_vec E = 2π cos(2π x₁)
        let e = to_spectral_vector(&VectorField::from_fn(g, |x| [0.0, (2.0 * PI * x[0]).sin()])).unwrap();
        let want = ScalarField::from_fn(g, |x| 2.0 * PI * (2.0 * PI * x[0]).cos());
        assert!(to_real(&curl_vec(&e)).max_abs_diff(&want).unwrap() < 1e-11);
    }

    #[test]
    fn non_finite_rejected() {
        let g = grid();
        let mut f = ScalarField::zeros(g);
        f.values_mut()[3] = f64::NAN;
        assert!(matches!(to_spectral(&f), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let a = ScalarField::zeros(grid());
        let b = ScalarField::zeros(GridSpec::new(16, 4).unwrap());
        assert!(matches!(a.axpy(1.0, &b), Err(Error::GridMismatch)));
    }

    #[test]
    fn point_evaluation_matches_nodes() {
        let g = grid();
        let s = random_band_limited(g, 9);
        let f = to_real(&s);
        for (i, x) in g.nodes().step_by(37) {
            assert!((s.eval(x) - f.values()[i]).abs() < 1e-11);
        }
    }

    #[test]
    fn bicubic_reproduces_smooth_field() {
        let g = GridSpec::new(64, 8).unwrap();
        let f = ScalarField::from_fn(g, |x| (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos());
        let p = [0.3137, 0.7719];
        let (v, grad) = f.interpolate_with_gradient(p);
        let exact = (2.0 * PI * p[0]).sin() * (2.0 * PI * p[1]).cos();
        assert!((v - exact).abs() < 1e-3);
        let gx = 2.0 * PI * (2.0 * PI * p[0]).cos() * (2.0 * PI * p[1]).cos();
        assert!((grad[0] - gx).abs() < 2e-2);
        let c = ScalarField::constant(g, 1.0);
        assert!((c.interpolate([0.123, 0.987]) - 1.0).abs() < 1e-15);
        // nodes are reproduced exactly
        assert!((f.interpolate(g.node(5, 9)) - f.at(5, 9)).abs() < 1e-15);
    }

    #[test]
    fn dump_round_trip() {
        let g = GridSpec::new(8, 2).unwrap();
        let e = VectorField::from_fn(g, |x| [x[0], -x[1]]);
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * 2 * 64);
        assert_eq!(&buf[0..4], DUMP_MAGIC);
        let back = VectorField::read_binary(&mut buf.as_slice(), g).unwrap();
        assert_eq!(back, e);
        let mut csv = Vec::new();
        e.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("x1,x2,value1,value2\n"));
        assert_eq!(text.lines().count(), 65);
    }

    #[test]
    fn torus_helpers() {
        assert!((wrap_delta(0.9) + 0.1).abs() < 1e-15);
        assert!((torus_distance([0.05, 0.5], [0.95, 0.5]) - 0.1).abs() < 1e-15);
        assert_eq!(wrap_unit(-1e-20), 0.0);
    }
}
