//! Exact enumeration over small discrete front-door models
//! `C → X → Z → Y`, `C → Y` with `C` unobserved.
//!
//! Every quantity is a finite sum over the joint table, so agreement between
//! the adjustment formulas and the interventional ground truth is limited
//! only by floating-point roundoff.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};

use crate::checkpoint::fmt_f64;
use crate::error::{Error, Result};
use crate::tensor::softmax_in_place;

/// Tolerance on row sums of probability tables.
pub const ROW_SUM_TOL: f64 = 1e-12;

/// Probabilities indexed by outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteDistribution(Vec<f64>);

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        validate_row(&probs).map_err(|msg| Error::Input(format!("invalid distribution: {msg}")))?;
        Ok(Self(probs))
    }

    pub fn point_mass(n: usize, at: usize) -> Self {
        let mut p = vec![0.0; n];
        p[at] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Total-variation distance `½ Σ |p − q|`.
    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }
}

fn validate_row(row: &[f64]) -> std::result::Result<(), String> {
    if row.is_empty() {
        return Err("empty row".into());
    }
    if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(format!("entry {v} is not a probability"));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOL {
        return Err(format!("sums to {sum}"));
    }
    Ok(())
}

/// Domain sizes `(|C|, |X|, |Z|, |Y|)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainSizes {
    pub c: usize,
    pub x: usize,
    pub z: usize,
    pub y: usize,
}

/// CPTs `P(C)`, `P(X|C)`, `P(Z|X)`, `P(Y|Z,C)`, each row-major with one row
/// per conditioning value (`P(Y|Z,C)` rows are indexed `z·|C| + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct FrontDoorScm {
    sizes: DomainSizes,
    p_c: Vec<f64>,
    p_x_given_c: Vec<Vec<f64>>,
    p_z_given_x: Vec<Vec<f64>>,
    p_y_given_zc: Vec<Vec<f64>>,
}

impl FrontDoorScm {
    pub fn new(
        p_c: Vec<f64>,
        p_x_given_c: Vec<Vec<f64>>,
        p_z_given_x: Vec<Vec<f64>>,
        p_y_given_zc: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let c = p_c.len();
        let x = p_x_given_c.first().map_or(0, Vec::len);
        let z = p_z_given_x.first().map_or(0, Vec::len);
        let y = p_y_given_zc.first().map_or(0, Vec::len);
        let sizes = DomainSizes { c, x, z, y };
        let check = |name: &str, rows: &[Vec<f64>], n_rows: usize, width: usize| -> Result<()> {
            if rows.len() != n_rows {
                return Err(Error::Input(format!("CPT {name}: expected {n_rows} rows, got {}", rows.len())));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.len() != width {
                    return Err(Error::Input(format!("CPT {name} row {i}: expected {width} entries, got {}", r.len())));
                }
                validate_row(r).map_err(|m| Error::Input(format!("CPT {name} row {i} {m}")))?;
            }
            Ok(())
        };
        check("C", std::slice::from_ref(&p_c), 1, c)?;
        check("X|C", &p_x_given_c, c, x)?;
        check("Z|X", &p_z_given_x, x, z)?;
        check("Y|Z,C", &p_y_given_zc, z * c, y)?;
        Ok(Self {
            sizes,
            p_c,
            p_x_given_c,
            p_z_given_x,
            p_y_given_zc,
        })
    }

    /// Binary model with strong confounding: `P(C=1)=0.5`,
    /// `P(X=1|C) = 0.9|0.1`, `P(Z=1|X) = 0.8|0.2`, `P(Y=1|Z,C) = 0.9` if `Z==C` else `0.1`.
    pub fn binary_example() -> Self {
        let bern = |p1: f64| vec![1.0 - p1, p1];
        let mut py = Vec::new();
        for z in 0..2 {
            for c in 0..2 {
                py.push(bern(if z == c { 0.9 } else { 0.1 }));
            }
        }
        Self::new(bern(0.5), vec![bern(0.1), bern(0.9)], vec![bern(0.2), bern(0.8)], py)
            .expect("valid catalog model")
    }

    pub fn sizes(&self) -> DomainSizes {
        self.sizes
    }

    pub fn p_c(&self) -> &[f64] {
        &self.p_c
    }

    pub fn p_x_given_c(&self, c: usize) -> &[f64] {
        &self.p_x_given_c[c]
    }

    pub fn p_z_given_x(&self, x: usize) -> &[f64] {
        &self.p_z_given_x[x]
    }

    pub fn p_y_given_zc(&self, z: usize, c: usize) -> &[f64] {
        &self.p_y_given_zc[z * self.sizes.c + c]
    }

    /// `P(c, x, z, y)`.
    pub fn joint(&self, c: usize, x: usize, z: usize, y: usize) -> f64 {
        self.p_c[c] * self.p_x_given_c[c][x] * self.p_z_given_x[x][z] * self.p_y_given_zc(z, c)[y]
    }

    fn check_x(&self, x: usize) -> Result<()> {
        if x >= self.sizes.x {
            return Err(Error::Input(format!("x={x} outside domain of size {}", self.sizes.x)));
        }
        Ok(())
    }

    fn check_z(&self, z: usize) -> Result<()> {
        if z >= self.sizes.z {
            return Err(Error::Input(format!("z={z} outside domain of size {}", self.sizes.z)));
        }
        Ok(())
    }

    /// Observed marginals over `(X, Z, Y)` and `(C, X, Y)`.
    fn observed(&self) -> Observed {
        let s = self.sizes;
        let mut xzy = vec![0.0; s.x * s.z * s.y];
        let mut cxy = vec![0.0; s.c * s.x * s.y];
        for c in 0..s.c {
            for x in 0..s.x {
                for z in 0..s.z {
                    for y in 0..s.y {
                        let p = self.joint(c, x, z, y);
                        xzy[(x * s.z + z) * s.y + y] += p;
                        cxy[(c * s.x + x) * s.y + y] += p;
                    }
                }
            }
        }
        Observed { s, xzy, cxy }
    }

    /// `P(Y | X=x)`, conditioning by exact Bayes over the joint.
    pub fn observational(&self, x: usize) -> Result<DiscreteDistribution> {
        self.check_x(x)?;
        let s = self.sizes;
        let px: f64 = (0..s.c).map(|c| self.p_c[c] * self.p_x_given_c[c][x]).sum();
        if px <= 0.0 {
            return Err(Error::UndefinedConditioning(format!("P(X={x}) = 0")));
        }
        let mut out = vec![0.0; s.y];
        for z in 0..s.z {
            let pz = self.p_z_given_x[x][z];
            for c in 0..s.c {
                // P(c | x, z) = P(c | x) since Z ⫫ C | X.
                let pc = self.p_c[c] * self.p_x_given_c[c][x] / px;
                for (y, o) in out.iter_mut().enumerate() {
                    *o += pz * pc * self.p_y_given_zc(z, c)[y];
                }
            }
        }
        Ok(DiscreteDistribution(out))
    }

    /// Ground truth `P(Y | do(X=x))` from the mutilated graph.
    pub fn intervene_truth(&self, x: usize) -> Result<DiscreteDistribution> {
        self.check_x(x)?;
        let s = self.sizes;
        let mut out = vec![0.0; s.y];
        for z in 0..s.z {
            let pz = self.p_z_given_x[x][z];
            for c in 0..s.c {
                for (y, o) in out.iter_mut().enumerate() {
                    *o += pz * self.p_c[c] * self.p_y_given_zc(z, c)[y];
                }
            }
        }
        Ok(DiscreteDistribution(out))
    }

    /// Front-door adjustment `Σ_z P(z|x) Σ_x' P(x') P(Y|z,x')` from observed
    /// `(X, Z, Y)` quantities only.
    pub fn front_door(&self, x: usize) -> Result<DiscreteDistribution> {
        self.check_x(x)?;
        let obs = self.observed();
        let pz_x = obs.p_z_given_x(x)?;
        let mut out = vec![0.0; self.sizes.y];
        for (z, &pz) in pz_x.iter().enumerate() {
            if pz == 0.0 {
                continue;
            }
            let inner = obs.do_z(z)?;
            for (o, v) in out.iter_mut().zip(inner) {
                *o += pz * v;
            }
        }
        Ok(DiscreteDistribution(out))
    }

    /// `P(Y | do(Z=z)) = Σ_x P(x) P(Y|x,z)` from observed quantities.
    pub fn do_z(&self, z: usize) -> Result<DiscreteDistribution> {
        self.check_z(z)?;
        Ok(DiscreteDistribution(self.observed().do_z(z)?))
    }

    /// Observed `P(Z | X=x)`.
    pub fn z_given_x(&self, x: usize) -> Result<DiscreteDistribution> {
        self.check_x(x)?;
        Ok(DiscreteDistribution(self.observed().p_z_given_x(x)?))
    }

    /// Backdoor adjustment `Σ_c P(Y|x,c) P(c)`, treating `C` as observed.
    pub fn backdoor(&self, x: usize) -> Result<DiscreteDistribution> {
        self.check_x(x)?;
        let obs = self.observed();
        let s = self.sizes;
        let mut out = vec![0.0; s.y];
        for c in 0..s.c {
            if self.p_c[c] == 0.0 {
                continue;
            }
            let row = &obs.cxy[(c * s.x + x) * s.y..(c * s.x + x + 1) * s.y];
            let pxc: f64 = row.iter().sum();
            if pxc <= 0.0 {
                return Err(Error::Positivity(format!("(x={x}, c={c}): P(X={x}, C={c}) = 0")));
            }
            for (o, v) in out.iter_mut().zip(row) {
                *o += self.p_c[c] * v / pxc;
            }
        }
        Ok(DiscreteDistribution(out))
    }

    /// Structured-text form: domain sizes then each CPT, row-major, at 17
    /// significant digits.
    pub fn to_text(&self) -> String {
        let s = self.sizes;
        let mut out = format!("catt-scm 1\nsizes {} {} {} {}\n", s.c, s.x, s.z, s.y);
        let mut table = |name: &str, rows: &[Vec<f64>]| {
            let _ = writeln!(out, "cpt {name}");
            for r in rows {
                let vals: Vec<String> = r.iter().map(|&v| fmt_f64(v)).collect();
                let _ = writeln!(out, "{}", vals.join(" "));
            }
        };
        table("C", std::slice::from_ref(&self.p_c));
        table("X|C", &self.p_x_given_c);
        table("Z|X", &self.p_z_given_x);
        table("Y|Z,C", &self.p_y_given_zc);
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let bad = |line: usize, msg: String| Error::Parse { line, msg };
        let (ln, header) = lines.next().ok_or_else(|| bad(1, "empty SCM file".into()))?;
        if header != "catt-scm 1" {
            return Err(bad(ln, format!("expected `catt-scm 1`, got {header:?}")));
        }
        let (ln, sizes_line) = lines.next().ok_or_else(|| bad(ln, "missing sizes".into()))?;
        let dims: Vec<usize> = sizes_line
            .strip_prefix("sizes")
            .ok_or_else(|| bad(ln, "expected `sizes C X Z Y`".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad(ln, format!("bad size {t:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 4 || dims.contains(&0) {
            return Err(bad(ln, "need four positive sizes".into()));
        }
        let (c, x, z, y) = (dims[0], dims[1], dims[2], dims[3]);
        let mut read_table = |name: &str, rows: usize, width: usize| -> Result<Vec<Vec<f64>>> {
            let (ln, head) = lines.next().ok_or_else(|| bad(0, format!("missing cpt {name}")))?;
            if head != format!("cpt {name}") {
                return Err(bad(ln, format!("expected `cpt {name}`, got {head:?}")));
            }
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let (ln, line) = lines
                    .next()
                    .ok_or_else(|| bad(ln, format!("cpt {name}: missing row {r}")))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| bad(ln, format!("bad value {t:?}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != width {
                    return Err(bad(ln, format!("cpt {name} row {r}: expected {width} values")));
                }
                validate_row(&vals).map_err(|m| bad(ln, format!("cpt {name} row {r} {m}")))?;
                out.push(vals);
            }
            Ok(out)
        };
        let pc = read_table("C", 1, c)?.remove(0);
        let pxc = read_table("X|C", c, x)?;
        let pzx = read_table("Z|X", x, z)?;
        let pyzc = read_table("Y|Z,C", z * c, y)?;
        Self::new(pc, pxc, pzx, pyzc)
    }
}

struct Observed {
    s: DomainSizes,
    xzy: Vec<f64>,
    cxy: Vec<f64>,
}

impl Observed {
    fn p_xz(&self, x: usize, z: usize) -> f64 {
        let base = (x * self.s.z + z) * self.s.y;
        self.xzy[base..base + self.s.y].iter().sum()
    }

    fn p_x(&self, x: usize) -> f64 {
        (0..self.s.z).map(|z| self.p_xz(x, z)).sum()
    }

    fn p_z_given_x(&self, x: usize) -> Result<Vec<f64>> {
        let px = self.p_x(x);
        if px <= 0.0 {
            return Err(Error::Positivity(format!("(x={x}): P(X={x}) = 0")));
        }
        Ok((0..self.s.z).map(|z| self.p_xz(x, z) / px).collect())
    }

    fn do_z(&self, z: usize) -> Result<Vec<f64>> {
        let s = self.s;
        let mut out = vec![0.0; s.y];
        for xp in 0..s.x {
            let px = self.p_x(xp);
            if px == 0.0 {
                continue;
            }
            let pxz = self.p_xz(xp, z);
            if pxz <= 0.0 {
                return Err(Error::Positivity(format!("(x'={xp}, z={z}): P(X={xp}, Z={z}) = 0")));
            }
            let base = (xp * s.z + z) * s.y;
            for (o, v) in out.iter_mut().zip(&self.xzy[base..base + s.y]) {
                *o += px * v / pxz;
            }
        }
        Ok(out)
    }
}

/// Random model with every CPT row drawn from a flat Dirichlet, floored at
/// `floor` and renormalized.
pub fn random_scm(sizes: DomainSizes, seed: u64, floor: f64) -> Result<FrontDoorScm> {
    let DomainSizes { c, x, z, y } = sizes;
    if [c, x, z, y].contains(&0) {
        return Err(Error::Config("domain sizes must be positive".into()));
    }
    let widest = c.max(x).max(z).max(y) as f64;
    if !(floor > 0.0 && floor < 1.0 / widest) {
        return Err(Error::Config(format!("positivity floor {floor} outside (0, 1/{widest})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut row = |n: usize| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| Exp1.sample(&mut rng)).collect();
        let total: f64 = raw.iter().sum();
        let floored: Vec<f64> = raw.iter().map(|v| (v / total).max(floor)).collect();
        let total: f64 = floored.iter().sum();
        floored.iter().map(|v| v / total).collect()
    };
    let pc = row(c);
    let pxc = (0..c).map(|_| row(x)).collect();
    let pzx = (0..x).map(|_| row(z)).collect();
    let pyzc = (0..z * c).map(|_| row(y)).collect();
    FrontDoorScm::new(pc, pxc, pzx, pyzc)
}

/// Weighted geometric mean `Π y_i^{w_i} = exp(Σ w_i ln y_i)`.
pub fn wgm(values: &[f64], weights: &DiscreteDistribution) -> Result<f64> {
    if values.len() != weights.len() {
        return Err(Error::dim("wgm", &[values.len()], &[weights.len()]));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite() || **v <= 0.0) {
        return Err(Error::Domain(format!("wgm needs positive values, got {v}")));
    }
    Ok(values
        .iter()
        .zip(weights.probs())
        .map(|(v, w)| w * v.ln())
        .sum::<f64>()
        .exp())
}

/// Affine logit map `g(z, x) = W_z z + W_x x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineScorer {
    /// `|Y|` rows of width `dim(z)`.
    pub wz: Vec<Vec<f64>>,
    /// `|Y|` rows of width `dim(x)`.
    pub wx: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl AffineScorer {
    pub fn logits(&self, z: &[f64], x: &[f64]) -> Vec<f64> {
        self.bias
            .iter()
            .enumerate()
            .map(|(k, b)| {
                b + self.wz[k].iter().zip(z).map(|(w, v)| w * v).sum::<f64>()
                    + self.wx[k].iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NwgmGap {
    /// `Σ_{z,x} P(z) P(x) Softmax(g(z, x))`.
    pub exact: DiscreteDistribution,
    /// `Softmax(g(E[z], E[x]))`.
    pub approx: DiscreteDistribution,
    pub gap: f64,
}

/// Compares the sampled predictive distribution with its NWGM
/// approximation, which moves both expectations inside the softmax.
pub fn nwgm_gap(
    g: &AffineScorer,
    pz: &DiscreteDistribution,
    z_embeds: &[Vec<f64>],
    px: &DiscreteDistribution,
    x_embeds: &[Vec<f64>],
) -> Result<NwgmGap> {
    if pz.len() != z_embeds.len() || px.len() != x_embeds.len() {
        return Err(Error::Input("distribution and embedding counts differ".into()));
    }
    let ny = g.bias.len();
    if g.wz.len() != ny || g.wx.len() != ny {
        return Err(Error::Input("scorer rows must match the number of classes".into()));
    }
    let mut exact = vec![0.0; ny];
    for (zi, ze) in z_embeds.iter().enumerate() {
        for (xi, xe) in x_embeds.iter().enumerate() {
            let w = pz.probs()[zi] * px.probs()[xi];
            let mut s = g.logits(ze, xe);
            softmax_in_place(&mut s);
            for (e, v) in exact.iter_mut().zip(s) {
                *e += w * v;
            }
        }
    }
    let mean = |p: &DiscreteDistribution, embeds: &[Vec<f64>]| -> Vec<f64> {
        let dim = embeds.first().map_or(0, Vec::len);
        let mut m = vec![0.0; dim];
        for (w, e) in p.probs().iter().zip(embeds) {
            for (mi, ei) in m.iter_mut().zip(e) {
                *mi += w * ei;
            }
        }
        m
    };
    let mut approx = g.logits(&mean(pz, z_embeds), &mean(px, x_embeds));
    softmax_in_place(&mut approx);
    let exact = DiscreteDistribution(exact);
    let approx = DiscreteDistribution(approx);
    let gap = exact.max_abs_diff(&approx);
    Ok(NwgmGap { exact, approx, gap })
}
