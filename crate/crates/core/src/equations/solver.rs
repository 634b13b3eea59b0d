use std::collections::BTreeMap;
use std::fmt;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};

use super::lexer::Variable;
use super::parser::{BinOp, EquationAst, Expr};

/// Highest total degree tracked while clearing denominators.
const MAX_DEGREE: u32 = 6;

/// A solution value: exact when the arithmetic stayed rational.
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Exact(BigRational),
    Real(f64),
}

impl Value {
    pub fn to_f64(&self) -> f64 {
        match self {
            Value::Exact(r) => r.to_f64().unwrap_or(f64::NAN),
            Value::Real(v) => *v,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Exact(r) if r.is_integer() => write!(f, "{}", r.numer()),
            Value::Exact(r) => write!(f, "{}/{}", r.numer(), r.denom()),
            Value::Real(v) => write!(f, "{v}"),
        }
    }
}

/// One consistent assignment of values to the equation variables.
pub type Assignment = Vec<(Variable, Value)>;

#[derive(Clone, Debug, PartialEq)]
pub enum SolutionSet {
    /// Each entry is one solution; a quadratic yields one entry per root.
    Solutions(Vec<Assignment>),
    NoSolution,
    InfiniteSolutions,
    Unsupported,
}

impl SolutionSet {
    /// Every solved value, flattened across solutions.
    pub fn values(&self) -> Vec<&Value> {
        match self {
            SolutionSet::Solutions(sols) => sols.iter().flatten().map(|(_, v)| v).collect(),
            _ => Vec::new(),
        }
    }
}

impl fmt::Display for SolutionSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SolutionSet::Solutions(sols) => {
                for (i, sol) in sols.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" | ")?;
                    }
                    for (j, (var, val)) in sol.iter().enumerate() {
                        if j > 0 {
                            f.write_str(", ")?;
                        }
                        write!(f, "{var}={val}")?;
                    }
                }
                Ok(())
            }
            SolutionSet::NoSolution => f.write_str("no solution"),
            SolutionSet::InfiniteSolutions => f.write_str("infinitely many solutions"),
            SolutionSet::Unsupported => f.write_str("unsupported"),
        }
    }
}

type Monomial = [u32; 3];

/// Sparse multivariate polynomial over the rationals in `x, y, z`.
#[derive(Clone, Debug, PartialEq, Default)]
struct Poly(BTreeMap<Monomial, BigRational>);

#[derive(Debug)]
struct Unsupported;

impl Poly {
    fn constant(c: BigRational) -> Poly {
        let mut m = BTreeMap::new();
        if !c.is_zero() {
            m.insert([0; 3], c);
        }
        Poly(m)
    }

    fn one() -> Poly {
        Poly::constant(BigRational::one())
    }

    fn var(v: Variable) -> Poly {
        let mut mono = [0; 3];
        mono[v.index()] = 1;
        Poly(BTreeMap::from([(mono, BigRational::one())]))
    }

    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn degree(&self) -> u32 {
        self.0.keys().map(|m| m.iter().sum()).max().unwrap_or(0)
    }

    fn as_constant(&self) -> Option<BigRational> {
        match self.0.len() {
            0 => Some(BigRational::zero()),
            1 => self.0.get(&[0; 3]).cloned(),
            _ => None,
        }
    }

    fn coeff(&self, mono: Monomial) -> BigRational {
        self.0.get(&mono).cloned().unwrap_or_else(BigRational::zero)
    }

    fn add(&self, other: &Poly, sign: i32) -> Poly {
        let mut out = self.0.clone();
        for (m, c) in &other.0 {
            let entry = out.entry(*m).or_insert_with(BigRational::zero);
            if sign < 0 {
                *entry -= c;
            } else {
                *entry += c;
            }
        }
        out.retain(|_, c| !c.is_zero());
        Poly(out)
    }

    fn mul(&self, other: &Poly) -> Result<Poly, Unsupported> {
        if self.degree() + other.degree() > MAX_DEGREE {
            return Err(Unsupported);
        }
        let mut out: BTreeMap<Monomial, BigRational> = BTreeMap::new();
        for (ma, ca) in &self.0 {
            for (mb, cb) in &other.0 {
                let m = [ma[0] + mb[0], ma[1] + mb[1], ma[2] + mb[2]];
                *out.entry(m).or_insert_with(BigRational::zero) += ca * cb;
            }
        }
        out.retain(|_, c| !c.is_zero());
        Ok(Poly(out))
    }

    fn scale(&self, s: &BigRational) -> Poly {
        let mut out = self.clone();
        for c in out.0.values_mut() {
            *c *= s;
        }
        out.0.retain(|_, c| !c.is_zero());
        out
    }

    fn eval_exact(&self, point: &[BigRational; 3]) -> BigRational {
        self.0
            .iter()
            .map(|(m, c)| {
                let mut term = c.clone();
                for (i, &e) in m.iter().enumerate() {
                    term *= num_traits::pow(point[i].clone(), e as usize);
                }
                term
            })
            .sum()
    }

    fn eval_f64(&self, point: &[f64; 3]) -> f64 {
        self.0
            .iter()
            .map(|(m, c)| {
                let mut term = c.to_f64().unwrap_or(f64::NAN);
                for (i, &e) in m.iter().enumerate() {
                    term *= point[i].powi(e as i32);
                }
                term
            })
            .sum()
    }
}

/// `num / den` with both polynomials.
#[derive(Clone, Debug)]
struct RatFn {
    num: Poly,
    den: Poly,
}

enum Failure {
    Unsupported,
    DivisionByZero,
}

impl From<Unsupported> for Failure {
    fn from(_: Unsupported) -> Self {
        Failure::Unsupported
    }
}

fn to_ratfn(e: &Expr) -> Result<RatFn, Failure> {
    Ok(match e {
        Expr::Num(r) => RatFn {
            num: Poly::constant(r.clone()),
            den: Poly::one(),
        },
        Expr::Var(v) => RatFn {
            num: Poly::var(*v),
            den: Poly::one(),
        },
        Expr::Neg(inner) => {
            let f = to_ratfn(inner)?;
            RatFn {
                num: f.num.scale(&-BigRational::one()),
                den: f.den,
            }
        }
        Expr::Bin(op, a, b) => {
            let fa = to_ratfn(a)?;
            if *op == BinOp::Pow {
                let exp = b.as_exponent().ok_or(Failure::Unsupported)?;
                return pow(fa, exp);
            }
            let fb = to_ratfn(b)?;
            match op {
                BinOp::Add | BinOp::Sub => {
                    let sign = if *op == BinOp::Add { 1 } else { -1 };
                    if fa.den == fb.den {
                        RatFn {
                            num: fa.num.add(&fb.num, sign),
                            den: fa.den,
                        }
                    } else {
                        RatFn {
                            num: fa.num.mul(&fb.den)?.add(&fb.num.mul(&fa.den)?, sign),
                            den: fa.den.mul(&fb.den)?,
                        }
                    }
                }
                BinOp::Mul => RatFn {
                    num: fa.num.mul(&fb.num)?,
                    den: fa.den.mul(&fb.den)?,
                },
                BinOp::Div => {
                    if fb.num.is_zero() {
                        return Err(Failure::DivisionByZero);
                    }
                    RatFn {
                        num: fa.num.mul(&fb.den)?,
                        den: fa.den.mul(&fb.num)?,
                    }
                }
                BinOp::Pow => unreachable!(),
            }
        }
    })
    .map(normalize)
}

/// Folds a constant denominator into the numerator.
fn normalize(f: RatFn) -> RatFn {
    match f.den.as_constant() {
        Some(c) if !c.is_one() && !c.is_zero() => RatFn {
            num: f.num.scale(&c.recip()),
            den: Poly::one(),
        },
        _ => f,
    }
}

fn pow(base: RatFn, exp: i64) -> Result<RatFn, Failure> {
    let (num, den) = if exp < 0 {
        if base.num.is_zero() {
            return Err(Failure::DivisionByZero);
        }
        (base.den, base.num)
    } else {
        (base.num, base.den)
    };
    let mut out = RatFn {
        num: Poly::one(),
        den: Poly::one(),
    };
    for _ in 0..exp.unsigned_abs() {
        out.num = out.num.mul(&num)?;
        out.den = out.den.mul(&den)?;
    }
    Ok(out)
}

/// Solves an equation list: linear systems in up to three variables by exact
/// elimination, a single univariate quadratic by the quadratic formula.
pub fn solve(ast: &EquationAst) -> SolutionSet {
    match solve_inner(ast) {
        Ok(s) => s,
        Err(Failure::Unsupported | Failure::DivisionByZero) => SolutionSet::Unsupported,
    }
}

fn solve_inner(ast: &EquationAst) -> Result<SolutionSet, Failure> {
    let vars = ast.variables();
    if vars.is_empty() || ast.equations.is_empty() {
        return Ok(SolutionSet::Unsupported);
    }
    let mut polys = Vec::with_capacity(ast.equations.len());
    let mut dens = Vec::new();
    for eq in &ast.equations {
        let l = to_ratfn(&eq.lhs)?;
        let r = to_ratfn(&eq.rhs)?;
        let p = l.num.mul(&r.den)?.add(&r.num.mul(&l.den)?, -1);
        for d in [l.den, r.den] {
            if d.as_constant().is_none() {
                dens.push(d);
            }
        }
        polys.push(p);
    }

    let max_degree = polys.iter().map(Poly::degree).max().unwrap_or(0);
    if max_degree <= 1 {
        return Ok(solve_linear(&polys, &vars, &dens));
    }
    if vars.len() == 1 && polys.len() == 1 && max_degree == 2 {
        return Ok(solve_quadratic(&polys[0], vars[0], &dens));
    }
    Ok(SolutionSet::Unsupported)
}

fn solve_linear(polys: &[Poly], vars: &[Variable], dens: &[Poly]) -> SolutionSet {
    let n = vars.len();
    let mut rows: Vec<Vec<BigRational>> = polys
        .iter()
        .map(|p| {
            let mut row: Vec<BigRational> = vars
                .iter()
                .map(|v| {
                    let mut m = [0; 3];
                    m[v.index()] = 1;
                    p.coeff(m)
                })
                .collect();
            row.push(-p.coeff([0; 3]));
            row
        })
        .collect();

    let rank = row_reduce(&mut rows, n);
    if rows[rank..].iter().any(|r| !r[n].is_zero()) {
        return SolutionSet::NoSolution;
    }
    if rank < n {
        return SolutionSet::InfiniteSolutions;
    }

    let mut point: [BigRational; 3] = Default::default();
    for (i, v) in vars.iter().enumerate() {
        point[v.index()] = rows[i][n].clone();
    }
    if dens.iter().any(|d| d.eval_exact(&point).is_zero()) {
        return SolutionSet::NoSolution;
    }
    let assignment = vars
        .iter()
        .map(|v| (*v, Value::Exact(point[v.index()].clone())))
        .collect();
    SolutionSet::Solutions(vec![assignment])
}

/// Reduced row echelon form over the first `n` columns of an augmented
/// matrix; returns the rank.
pub(crate) fn row_reduce(rows: &mut [Vec<BigRational>], n: usize) -> usize {
    let mut rank = 0;
    for col in 0..n {
        let Some(pivot) = (rank..rows.len()).find(|&r| !rows[r][col].is_zero()) else {
            continue;
        };
        rows.swap(rank, pivot);
        let inv = rows[rank][col].recip();
        for v in rows[rank].iter_mut() {
            *v *= &inv;
        }
        let pivot_row = rows[rank].clone();
        for (r, row) in rows.iter_mut().enumerate() {
            if r == rank || row[col].is_zero() {
                continue;
            }
            let factor = row[col].clone();
            for (v, p) in row.iter_mut().zip(&pivot_row) {
                *v -= &factor * p;
            }
        }
        rank += 1;
        if rank == rows.len() {
            break;
        }
    }
    rank
}

/// Exact square root of a non-negative rational, when it exists.
fn rational_sqrt(r: &BigRational) -> Option<BigRational> {
    let (n, d) = (r.numer(), r.denom());
    let (sn, sd) = (n.sqrt(), d.sqrt());
    (&sn * &sn == *n && &sd * &sd == *d).then(|| BigRational::new(sn, sd))
}

fn solve_quadratic(p: &Poly, var: Variable, dens: &[Poly]) -> SolutionSet {
    let mono = |e: u32| {
        let mut m = [0; 3];
        m[var.index()] = e;
        m
    };
    let (a, b, c) = (p.coeff(mono(2)), p.coeff(mono(1)), p.coeff(mono(0)));
    let disc = &b * &b - BigRational::from_integer(BigInt::from(4)) * &a * &c;
    if disc.is_negative() {
        return SolutionSet::NoSolution;
    }
    let two_a = &a * BigRational::from_integer(BigInt::from(2));

    let mut roots: Vec<Value> = if disc.is_zero() {
        vec![Value::Exact(-&b / &two_a)]
    } else if let Some(s) = rational_sqrt(&disc) {
        let mut r = vec![(-&b - &s) / &two_a, (-&b + &s) / &two_a];
        r.sort();
        r.into_iter().map(Value::Exact).collect()
    } else {
        // Cancellation-free pairing of the two roots.
        let (af, bf, cf) = (a.to_f64().unwrap(), b.to_f64().unwrap(), c.to_f64().unwrap());
        let sq = disc.to_f64().unwrap().sqrt();
        let q = -0.5 * (bf + bf.signum() * sq);
        let (mut r1, mut r2) = if q == 0.0 {
            (sq / (2.0 * af), -sq / (2.0 * af))
        } else {
            (q / af, cf / q)
        };
        if r1 > r2 {
            std::mem::swap(&mut r1, &mut r2);
        }
        vec![Value::Real(r1), Value::Real(r2)]
    };

    roots.retain(|root| {
        dens.iter().all(|d| match root {
            Value::Exact(r) => {
                let mut point: [BigRational; 3] = Default::default();
                point[var.index()] = r.clone();
                !d.eval_exact(&point).is_zero()
            }
            Value::Real(v) => {
                let mut point = [0.0; 3];
                point[var.index()] = *v;
                d.eval_f64(&point).abs() > 1e-12
            }
        })
    });
    if roots.is_empty() {
        return SolutionSet::NoSolution;
    }
    SolutionSet::Solutions(roots.into_iter().map(|r| vec![(var, r)]).collect())
}

#[cfg(test)]
mod tests {
    use super::super::parser::parse;
    use super::*;

    fn int(n: i64) -> Value {
        Value::Exact(BigRational::from_integer(n.into()))
    }

    #[test]
    fn linear_pair() {
        let s = solve(&parse("x+y=10; x-y=2").unwrap());
        assert_eq!(
            s,
            SolutionSet::Solutions(vec![vec![(Variable::X, int(6)), (Variable::Y, int(4))]])
        );
    }

    #[test]
    fn factorable_quadratic() {
        let s = solve(&parse("x^2-5*x+6=0").unwrap());
        assert_eq!(
            s,
            SolutionSet::Solutions(vec![vec![(Variable::X, int(2))], vec![(Variable::X, int(3))]])
        );
    }

    #[test]
    fn degenerate_systems() {
        assert_eq!(solve(&parse("x+1=x").unwrap()), SolutionSet::NoSolution);
        assert_eq!(solve(&parse("x+y=2; 2*x+2*y=4").unwrap()), SolutionSet::InfiniteSolutions);
        assert_eq!(solve(&parse("x^2=-4").unwrap()), SolutionSet::NoSolution);
        assert_eq!(solve(&parse("2+3=5").unwrap()), SolutionSet::Unsupported);
        assert_eq!(solve(&parse("x^3=8").unwrap()), SolutionSet::Unsupported);
        assert_eq!(solve(&parse("x*y=6; x+y=5").unwrap()), SolutionSet::Unsupported);
        assert_eq!(solve(&parse("x/0=1").unwrap()), SolutionSet::Unsupported);
        assert_eq!(solve(&parse("x^2=4; x=2").unwrap()), SolutionSet::Unsupported);
    }

    #[test]
    fn overdetermined_consistent_system() {
        let s = solve(&parse("x+1=3; 2*x=4").unwrap());
        assert_eq!(s, SolutionSet::Solutions(vec![vec![(Variable::X, int(2))]]));
    }

    #[test]
    fn rational_equations_clear_denominators() {
        let s = solve(&parse("12/x=3").unwrap());
        assert_eq!(s, SolutionSet::Solutions(vec![vec![(Variable::X, int(4))]]));
        // x = 0 would zero the denominator.
        assert_eq!(solve(&parse("x/x=2").unwrap()), SolutionSet::NoSolution);
        let s = solve(&parse("x^-1 = 0.5").unwrap());
        assert_eq!(s, SolutionSet::Solutions(vec![vec![(Variable::X, int(2))]]));
        // 1/x + x = 2.5 → x² − 2.5x + 1 = 0 → {0.5, 2}
        let s = solve(&parse("1/x+x=2.5").unwrap());
        let vals: Vec<f64> = s.values().iter().map(|v| v.to_f64()).collect();
        assert_eq!(vals, vec![0.5, 2.0]);
    }

    #[test]
    fn irrational_roots_are_real_and_sound() {
        let ast = parse("x^2-2=0").unwrap();
        let s = solve(&ast);
        let vals: Vec<f64> = s.values().iter().map(|v| v.to_f64()).collect();
        assert_eq!(vals.len(), 2);
        assert!((vals[0] + 2f64.sqrt()).abs() < 1e-12);
        assert!((vals[1] - 2f64.sqrt()).abs() < 1e-12);
        assert!(s.values().iter().all(|v| matches!(v, Value::Real(_))));
    }

    #[test]
    fn double_root_reported_once() {
        let s = solve(&parse("x^2-6*x+9=0").unwrap());
        assert_eq!(s, SolutionSet::Solutions(vec![vec![(Variable::X, int(3))]]));
    }

    #[test]
    fn three_variables() {
        let s = solve(&parse("x+y+z=6; x-y=1; y-z=1").unwrap());
        let vals: Vec<f64> = s.values().iter().map(|v| v.to_f64()).collect();
        assert_eq!(vals, vec![3.0, 2.0, 1.0]);
    }
}
