//! Minkowski 4-vectors, Lorentz boosts and flat foliations.
//!
//! Signature is (+,-,-,-) with c = 1. A flat foliation is a family of
//! parallel spacelike hyperplanes, characterised by a future-pointing unit
//! timelike normal `n`; its leaves are the level sets of `t(p) = n·p`.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance on `n·n = 1` accepted by [`FoliationNormal::new`].
pub const NORM_TOLERANCE: f64 = 1e-12;

/// Relative pivot threshold used for rank decisions in [`solve_normal`].
pub const RANK_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpacetimeError {
    #[error("boost velocity |beta| = {0} must be strictly below 1")]
    BetaOutOfRange(f64),
    #[error("separation vectors are linearly dependent (rank {rank} < 3)")]
    DegenerateTriad { rank: usize },
    #[error("null-space vector is not timelike (Minkowski norm {norm})")]
    NonTimelikeNormal { norm: f64 },
    #[error("invalid foliation normal: {0}")]
    InvalidNormal(String),
    #[error("non-finite component in {0}")]
    NonFinite(&'static str),
}

/// A space-time point (or displacement) in a fixed inertial frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[repr(C)]
pub struct Event4 {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Event4 {
    pub const fn new(t: f64, x: f64, y: f64, z: f64) -> Self {
        Event4 { t, x, y, z }
    }

    pub fn from_parts(t: f64, r: [f64; 3]) -> Self {
        Event4::new(t, r[0], r[1], r[2])
    }

    pub fn spatial(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.t, self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Event4::new(a[0], a[1], a[2], a[3])
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Minkowski square `t² - |r|²`.
    pub fn interval(&self) -> f64 {
        minkowski_dot(*self, *self)
    }
}

impl Add for Event4 {
    type Output = Event4;
    fn add(self, o: Event4) -> Event4 {
        Event4::new(self.t + o.t, self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Event4 {
    type Output = Event4;
    fn sub(self, o: Event4) -> Event4 {
        Event4::new(self.t - o.t, self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Event4 {
    type Output = Event4;
    fn neg(self) -> Event4 {
        Event4::new(-self.t, -self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Event4 {
    type Output = Event4;
    fn mul(self, k: f64) -> Event4 {
        Event4::new(self.t * k, self.x * k, self.y * k, self.z * k)
    }
}

impl fmt::Display for Event4 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.t, self.x, self.y, self.z)
    }
}

/// Minkowski scalar product `a⁰b⁰ - a·b`.
pub fn minkowski_dot(a: Event4, b: Event4) -> f64 {
    a.t * b.t - (a.x * b.x + a.y * b.y + a.z * b.z)
}

/// Future-pointing unit timelike vector characterising a flat foliation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct FoliationNormal(Event4);

impl FoliationNormal {
    /// Rest frame of the lab: `(1, 0, 0, 0)`.
    pub const LAB: FoliationNormal = FoliationNormal(Event4::new(1.0, 0.0, 0.0, 0.0));

    pub fn new(n0: f64, nx: f64, ny: f64, nz: f64) -> Result<Self, SpacetimeError> {
        let v = Event4::new(n0, nx, ny, nz);
        if !v.is_finite() {
            return Err(SpacetimeError::NonFinite("foliation normal"));
        }
        if n0 <= 0.0 {
            return Err(SpacetimeError::InvalidNormal(format!(
                "n0 = {n0} is not future-pointing"
            )));
        }
        let norm = v.interval();
        if (norm - 1.0).abs() > NORM_TOLERANCE {
            return Err(SpacetimeError::InvalidNormal(format!(
                "Minkowski norm {norm} != 1"
            )));
        }
        Ok(FoliationNormal(v))
    }

    /// Normalises an arbitrary timelike vector, flipping it to the future if needed.
    pub fn from_timelike(v: Event4) -> Result<Self, SpacetimeError> {
        if !v.is_finite() {
            return Err(SpacetimeError::NonFinite("foliation normal"));
        }
        let norm = v.interval();
        if !(norm > 0.0) {
            return Err(SpacetimeError::NonTimelikeNormal { norm });
        }
        let mut u = v * (1.0 / norm.sqrt());
        if u.t < 0.0 {
            u = -u;
        }
        // Recompute n0 from the spatial part so that n·n = 1 holds to rounding.
        let sp = u.x * u.x + u.y * u.y + u.z * u.z;
        u.t = (1.0 + sp).sqrt();
        Ok(FoliationNormal(u))
    }

    /// Normal of the rest frame of an observer moving with velocity `beta`
    /// relative to the lab, i.e. its four-velocity `γ(1, β)`.
    pub fn from_boost(b: &BoostSpec) -> Self {
        let g = b.gamma();
        let [bx, by, bz] = b.beta();
        FoliationNormal(Event4::new(g, g * bx, g * by, g * bz))
    }

    pub fn as_event(&self) -> Event4 {
        self.0
    }

    pub fn components(&self) -> [f64; 4] {
        self.0.to_array()
    }

    /// Rapidity separating two normals, `acosh(n·m)`, evaluated in a form
    /// that stays accurate for nearly equal vectors.
    pub fn hyperbolic_angle(&self, other: &FoliationNormal) -> f64 {
        let d = self.0 - other.0;
        let q = -minkowski_dot(d, d);
        2.0 * (q.max(0.0).sqrt() / 2.0).asinh()
    }
}

impl TryFrom<[f64; 4]> for FoliationNormal {
    type Error = SpacetimeError;
    fn try_from(a: [f64; 4]) -> Result<Self, Self::Error> {
        FoliationNormal::new(a[0], a[1], a[2], a[3])
    }
}

impl From<FoliationNormal> for [f64; 4] {
    fn from(n: FoliationNormal) -> [f64; 4] {
        n.components()
    }
}

/// Velocity of a frame relative to the lab.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoostSpec {
    beta: [f64; 3],
}

impl BoostSpec {
    pub fn new(beta: [f64; 3]) -> Result<Self, SpacetimeError> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(SpacetimeError::NonFinite("boost velocity"));
        }
        let speed = beta.iter().map(|b| b * b).sum::<f64>().sqrt();
        if speed >= 1.0 {
            return Err(SpacetimeError::BetaOutOfRange(speed));
        }
        Ok(BoostSpec { beta })
    }

    pub fn identity() -> Self {
        BoostSpec { beta: [0.0; 3] }
    }

    pub fn beta(&self) -> [f64; 3] {
        self.beta
    }

    pub fn speed_sq(&self) -> f64 {
        self.beta.iter().map(|b| b * b).sum()
    }

    pub fn gamma(&self) -> f64 {
        1.0 / (1.0 - self.speed_sq()).sqrt()
    }

    pub fn inverse(&self) -> Self {
        BoostSpec {
            beta: self.beta.map(|b| -b),
        }
    }
}

/// Active Lorentz boost of `e` by velocity `b.beta` (a particle at rest is
/// given four-velocity `γ(1, β)`).
pub fn boost(e: Event4, b: &BoostSpec) -> Event4 {
    let b2 = b.speed_sq();
    if b2 == 0.0 {
        return e;
    }
    let g = b.gamma();
    let [bx, by, bz] = b.beta;
    let bdotr = bx * e.x + by * e.y + bz * e.z;
    let k = (g - 1.0) * bdotr / b2 + g * e.t;
    Event4::new(g * (e.t + bdotr), e.x + k * bx, e.y + k * by, e.z + k * bz)
}

/// Checked variant of [`boost`] that validates a raw velocity first.
pub fn boost_by(e: Event4, beta: [f64; 3]) -> Result<Event4, SpacetimeError> {
    Ok(boost(e, &BoostSpec::new(beta)?))
}

/// Leaf label of `p` in the linear gauge `t(p) = n·p`.
pub fn foliation_time(n: &FoliationNormal, p: Event4) -> f64 {
    minkowski_dot(n.as_event(), p)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalOrder {
    AliceFirst,
    BobFirst,
    Simultaneous,
}

impl TemporalOrder {
    pub fn reversed(self) -> Self {
        match self {
            TemporalOrder::AliceFirst => TemporalOrder::BobFirst,
            TemporalOrder::BobFirst => TemporalOrder::AliceFirst,
            TemporalOrder::Simultaneous => TemporalOrder::Simultaneous,
        }
    }
}

/// Order of Alice's event `a` and Bob's event `b` along the foliation.
pub fn temporal_order(n: &FoliationNormal, a: Event4, b: Event4, tol: f64) -> TemporalOrder {
    let d = foliation_time(n, a) - foliation_time(n, b);
    if d < -tol {
        TemporalOrder::AliceFirst
    } else if d > tol {
        TemporalOrder::BobFirst
    } else {
        TemporalOrder::Simultaneous
    }
}

/// Rows of the metric-contracted system: `row·n = minkowski_dot(n, s)`.
fn metric_rows(seps: [Event4; 3]) -> [[f64; 4]; 3] {
    seps.map(|s| [s.t, -s.x, -s.y, -s.z])
}

/// Reduced row-echelon form by Gaussian elimination with partial pivoting.
/// Returns the pivot columns; a column is treated as zero when its best
/// pivot is below `RANK_THRESHOLD` times the largest entry of the matrix.
fn row_reduce(m: &mut [[f64; 4]; 3]) -> Vec<usize> {
    let scale = m
        .iter()
        .flat_map(|r| r.iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let mut pivots = Vec::with_capacity(3);
    if scale == 0.0 || !scale.is_finite() {
        return pivots;
    }
    let eps = RANK_THRESHOLD * scale;
    let mut row = 0;
    for col in 0..4 {
        if row == 3 {
            break;
        }
        let (best, best_val) = (row..3)
            .map(|r| (r, m[r][col].abs()))
            .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_val <= eps {
            for r in row..3 {
                m[r][col] = 0.0;
            }
            continue;
        }
        m.swap(row, best);
        let p = m[row][col];
        for c in 0..4 {
            m[row][c] /= p;
        }
        for r in 0..3 {
            if r != row {
                let f = m[r][col];
                if f != 0.0 {
                    for c in 0..4 {
                        m[r][c] -= f * m[row][c];
                    }
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    pivots
}

/// Rank of the 3×4 matrix of separations.
pub fn triad_rank(s1: Event4, s2: Event4, s3: Event4) -> usize {
    let mut m = metric_rows([s1, s2, s3]);
    row_reduce(&mut m).len()
}

/// True iff the three separation vectors are linearly independent.
pub fn check_triad_independence(s1: Event4, s2: Event4, s3: Event4) -> bool {
    triad_rank(s1, s2, s3) == 3
}

/// Recovers the foliation normal orthogonal to three separations of
/// simultaneous event pairs.
pub fn solve_normal(s1: Event4, s2: Event4, s3: Event4) -> Result<FoliationNormal, SpacetimeError> {
    if ![s1, s2, s3].iter().all(Event4::is_finite) {
        return Err(SpacetimeError::NonFinite("separation vector"));
    }
    let mut m = metric_rows([s1, s2, s3]);
    let pivots = row_reduce(&mut m);
    if pivots.len() < 3 {
        return Err(SpacetimeError::DegenerateTriad { rank: pivots.len() });
    }
    let free = (0..4)
        .find(|c| !pivots.contains(c))
        .expect("one free column");
    let mut v = [0.0; 4];
    v[free] = 1.0;
    for (row, &col) in pivots.iter().enumerate() {
        v[col] = -m[row][free];
    }
    let candidate = Event4::from_array(v);
    let norm = candidate.interval();
    if !(norm > 0.0) {
        return Err(SpacetimeError::NonTimelikeNormal { norm });
    }
    let n = FoliationNormal::from_timelike(candidate)?;
    Ok(polish(n, [s1, s2, s3]))
}

/// One step of Newton-like refinement: re-solves the orthogonality residual
/// in the full 3×3 spatial system with `n0` fixed, then renormalises. Keeps
/// the recovered normal accurate when the triad is poorly scaled.
fn polish(n: FoliationNormal, seps: [Event4; 3]) -> FoliationNormal {
    let e = n.as_event();
    // Solve for spatial correction δ with n0 fixed: s.t*n0 - s_sp·(n_sp+δ) = 0.
    let a = seps.map(|s| [s.x, s.y, s.z]);
    let r = seps.map(|s| minkowski_dot(e, s));
    let det = det3(&a);
    if det.abs() < 1e-300 || !det.is_finite() {
        return n;
    }
    let mut delta = [0.0; 3];
    for k in 0..3 {
        let mut ak = a;
        for i in 0..3 {
            ak[i][k] = r[i];
        }
        delta[k] = det3(&ak) / det;
    }
    let refined = Event4::new(e.t, e.x + delta[0], e.y + delta[1], e.z + delta[2]);
    let residual = |v: Event4| {
        seps.iter()
            .map(|s| minkowski_dot(v, *s).abs())
            .fold(0.0, f64::max)
    };
    match FoliationNormal::from_timelike(refined) {
        Ok(m) if residual(m.as_event()) < residual(e) => m,
        _ => n,
    }
}

fn det3(a: &[[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Two events recorded at a switch point, nominally on one leaf.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimultaneousPair {
    pub p_a: Event4,
    pub p_b: Event4,
    pub label: usize,
}

impl SimultaneousPair {
    pub fn separation(&self) -> Event4 {
        self.p_a - self.p_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const B06: [f64; 3] = [0.6, 0.0, 0.0];

    fn close(a: Event4, b: Event4, tol: f64) -> bool {
        (a - b).to_array().iter().all(|c| c.abs() <= tol)
    }

    #[test]
    fn dot_examples() {
        let e = Event4::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(minkowski_dot(e, e), 1.0);
        let l = Event4::new(1.0, 1.0, 0.0, 0.0);
        assert_eq!(minkowski_dot(l, l), 0.0);
        let b = Event4::new(1.25, 0.75, 0.0, 0.0);
        assert!((minkowski_dot(b, b) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn boost_examples() {
        let e = Event4::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(boost(e, &BoostSpec::identity()), e);
        let b = BoostSpec::new(B06).unwrap();
        assert!((b.gamma() - 1.25).abs() < 1e-15);
        assert!(close(
            boost(e, &b),
            Event4::new(1.25, 0.75, 0.0, 0.0),
            1e-15
        ));
        let p = Event4::new(0.3, -2.0, 1.5, 4.0);
        assert!(close(boost(boost(p, &b), &b.inverse()), p, 1e-12));
    }

    #[test]
    fn boost_rejects_superluminal() {
        assert!(matches!(
            BoostSpec::new([1.0, 0.0, 0.0]),
            Err(SpacetimeError::BetaOutOfRange(_))
        ));
        assert!(matches!(
            boost_by(Event4::default(), [0.8, 0.7, 0.0]),
            Err(SpacetimeError::BetaOutOfRange(_))
        ));
    }

    #[test]
    fn foliation_time_examples() {
        let p = Event4::new(3.2, 7.0, -1.0, 0.0);
        assert_eq!(foliation_time(&FoliationNormal::LAB, p), 3.2);
        let n = FoliationNormal::new(1.25, 0.75, 0.0, 0.0).unwrap();
        assert!((foliation_time(&n, Event4::new(1.0, 0.0, 0.0, 0.0)) - 1.25).abs() < 1e-15);
        assert!(foliation_time(&n, Event4::new(0.6, 1.0, 0.0, 0.0)).abs() < 1e-15);
    }

    #[test]
    fn temporal_order_examples() {
        let o = Event4::default();
        let later = Event4::new(1.0, 0.0, 0.0, 0.0);
        assert_eq!(
            temporal_order(&FoliationNormal::LAB, o, later, 0.0),
            TemporalOrder::AliceFirst
        );
        let n = FoliationNormal::new(1.25, 0.75, 0.0, 0.0).unwrap();
        let b = Event4::new(0.1, 1.0, 0.0, 0.0);
        assert!((foliation_time(&n, b) - foliation_time(&n, o) + 0.625).abs() < 1e-15);
        assert_eq!(temporal_order(&n, o, b, 0.0), TemporalOrder::BobFirst);
        assert_eq!(temporal_order(&n, b, b, 0.0), TemporalOrder::Simultaneous);
    }

    #[test]
    fn solve_normal_examples() {
        let ex = Event4::new(0.0, 1.0, 0.0, 0.0);
        let ey = Event4::new(0.0, 0.0, 1.0, 0.0);
        let ez = Event4::new(0.0, 0.0, 0.0, 1.0);
        let n = solve_normal(ex, ey, ez).unwrap();
        assert!(close(n.as_event(), Event4::new(1.0, 0.0, 0.0, 0.0), 1e-15));

        let n = solve_normal(Event4::new(0.6, 1.0, 0.0, 0.0), ey, ez).unwrap();
        assert!(close(
            n.as_event(),
            Event4::new(1.25, 0.75, 0.0, 0.0),
            1e-14
        ));

        let err = solve_normal(ex, ex * 2.0, ez).unwrap_err();
        assert_eq!(err, SpacetimeError::DegenerateTriad { rank: 2 });
    }

    #[test]
    fn solve_normal_rejects_timelike_tangents() {
        // Null-space vector (0,0,0,1) is spacelike.
        let s1 = Event4::new(1.0, 0.0, 0.0, 0.0);
        let s2 = Event4::new(0.0, 1.0, 0.0, 0.0);
        let s3 = Event4::new(0.0, 0.0, 1.0, 0.0);
        assert!(matches!(
            solve_normal(s1, s2, s3),
            Err(SpacetimeError::NonTimelikeNormal { .. })
        ));
    }

    #[test]
    fn triad_independence_examples() {
        let ex = Event4::new(0.0, 1.0, 0.0, 0.0);
        let ey = Event4::new(0.0, 0.0, 1.0, 0.0);
        let ez = Event4::new(0.0, 0.0, 0.0, 1.0);
        assert!(check_triad_independence(ex, ey, ez));
        assert!(!check_triad_independence(ex, ex * 2.0, ez));
        let b = BoostSpec::new(B06).unwrap();
        assert!(check_triad_independence(
            boost(ex, &b),
            boost(ey, &b),
            boost(ez, &b)
        ));
    }

    #[test]
    fn normal_constructor_invariants() {
        assert!(FoliationNormal::new(-1.0, 0.0, 0.0, 0.0).is_err());
        assert!(FoliationNormal::new(1.0, 0.1, 0.0, 0.0).is_err());
        let n = FoliationNormal::from_boost(&BoostSpec::new([0.3, -0.2, 0.1]).unwrap());
        assert!((n.as_event().interval() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyperbolic_angle_matches_rapidity() {
        let n = FoliationNormal::from_boost(&BoostSpec::new(B06).unwrap());
        assert!((n.hyperbolic_angle(&FoliationNormal::LAB) - 0.6f64.atanh()).abs() < 1e-14);
        assert_eq!(n.hyperbolic_angle(&n), 0.0);
    }
}
