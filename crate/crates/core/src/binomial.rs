//! Exact binomial tails and the parameter-safety arithmetic built on them.
//!
//! Every probability is an exact [`BigRational`]; nothing is rounded until it
//! is formatted for display.

use std::fmt;

use num_bigint::BigInt;
use num_integer::Integer;
use num_rational::BigRational;
use num_traits::{One, Pow, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AtLeast,
    AtMost,
    Exactly,
}

/// `Bin(k, x, ⋈ m)`: the probability that `k` independent trials with success
/// probability `x` produce a number of successes related to `m` by `direction`.
#[derive(Debug, Clone, PartialEq)]
pub struct TailQuery {
    pub k: u64,
    pub x: BigRational,
    pub m: u64,
    pub direction: Direction,
}

impl TailQuery {
    pub fn at_least(k: u64, x: BigRational, m: u64) -> Self {
        TailQuery { k, x, m, direction: Direction::AtLeast }
    }
    pub fn at_most(k: u64, x: BigRational, m: u64) -> Self {
        TailQuery { k, x, m, direction: Direction::AtMost }
    }
    pub fn exactly(k: u64, x: BigRational, m: u64) -> Self {
        TailQuery { k, x, m, direction: Direction::Exactly }
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_negative() || self.x > BigRational::one() {
            return Err(Error::InvalidQuery(format!("x = {} is not in [0, 1]", self.x)));
        }
        if self.m > self.k {
            return Err(Error::InvalidQuery(format!("m = {} exceeds k = {}", self.m, self.k)));
        }
        Ok(())
    }
}

pub fn ratio(num: i64, den: i64) -> BigRational {
    BigRational::new(BigInt::from(num), BigInt::from(den))
}

/// Parses a plain decimal such as `0.2` or `3/5` into an exact rational.
pub fn parse_rational(text: &str) -> Result<BigRational> {
    let bad = || Error::InvalidQuery(format!("cannot parse `{text}` as a probability"));
    let t = text.trim();
    if let Some((a, b)) = t.split_once('/') {
        let a: BigInt = a.trim().parse().map_err(|_| bad())?;
        let b: BigInt = b.trim().parse().map_err(|_| bad())?;
        if b.is_zero() {
            return Err(bad());
        }
        return Ok(BigRational::new(a, b));
    }
    let (int, frac) = t.split_once('.').unwrap_or((t, ""));
    if int.is_empty() && frac.is_empty() {
        return Err(bad());
    }
    if !int.chars().all(|c| c.is_ascii_digit()) || !frac.chars().all(|c| c.is_ascii_digit()) {
        return Err(bad());
    }
    let digits: BigInt = format!("{int}{frac}").parse().map_err(|_| bad())?;
    let den = BigInt::from(10u32).pow(frac.len() as u32);
    Ok(BigRational::new(digits, den))
}

fn binom(k: u64, i: u64) -> BigInt {
    let i = i.min(k - i);
    let mut c = BigInt::one();
    for j in 0..i {
        c = c * BigInt::from(k - j) / BigInt::from(j + 1);
    }
    c
}

fn pmf_terms(k: u64, x: &BigRational) -> Vec<BigRational> {
    let y = BigRational::one() - x;
    (0..=k)
        .map(|i| {
            BigRational::from_integer(binom(k, i)) * Pow::pow(x, i as u32) * Pow::pow(&y, (k - i) as u32)
        })
        .collect()
}

/// Exact value of the query.
pub fn bin(q: &TailQuery) -> Result<BigRational> {
    q.validate()?;
    let terms = pmf_terms(q.k, &q.x);
    let m = q.m as usize;
    let sum = |r: &[BigRational]| r.iter().fold(BigRational::zero(), |a, b| a + b);
    Ok(match q.direction {
        Direction::AtLeast => sum(&terms[m..]),
        Direction::AtMost => sum(&terms[..=m]),
        Direction::Exactly => terms[m].clone(),
    })
}

/// `Bin(k, x, ≥ m)` for `m` in `0..=k+1`; `m = k+1` gives zero.
pub fn bin_at_least(k: u64, x: &BigRational, m: u64) -> Result<BigRational> {
    if m == k + 1 {
        return Ok(BigRational::zero());
    }
    bin(&TailQuery::at_least(k, x.clone(), m))
}

/// Largest `e` with `10^e ≤ r`, for positive `r`.
fn decimal_exponent(r: &BigRational) -> i64 {
    let ten = BigRational::from_integer(BigInt::from(10));
    let bits = r.numer().bits() as i64 - r.denom().bits() as i64;
    let mut e = (bits as f64 * std::f64::consts::LOG10_2).floor() as i64;
    let pow10 = |e: i64| {
        if e >= 0 {
            Pow::pow(&ten, e as u32)
        } else {
            BigRational::one() / Pow::pow(&ten, (-e) as u32)
        }
    };
    while pow10(e) > *r {
        e -= 1;
    }
    while pow10(e + 1) <= *r {
        e += 1;
    }
    e
}

/// Scientific notation with `digits` significant digits, rounded half up.
pub fn format_sci(r: &BigRational, digits: usize) -> String {
    assert!(digits >= 1);
    if r.is_zero() {
        return "0".into();
    }
    let sign = if r.is_negative() { "-" } else { "" };
    let a = r.abs();
    let mut e = decimal_exponent(&a);
    let shift = digits as i64 - 1 - e;
    let ten = BigInt::from(10);
    let scaled = if shift >= 0 {
        &a * BigRational::from_integer(Pow::pow(&ten, shift as u32))
    } else {
        &a / BigRational::from_integer(Pow::pow(&ten, (-shift) as u32))
    };
    let (q, rem) = scaled.numer().div_rem(scaled.denom());
    let mut q = if rem * 2 >= *scaled.denom() { q + 1 } else { q };
    if q == Pow::pow(&ten, digits as u32) {
        q /= 10;
        e += 1;
    }
    let s = q.to_string();
    if digits == 1 {
        format!("{sign}{s}e{e}")
    } else {
        format!("{sign}{}.{}e{e}", &s[..1], &s[1..])
    }
}

pub fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

/// One line of the safety report: a computed quantity against a stated bound.
#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    pub name: String,
    pub value: String,
    pub relation: &'static str,
    pub bound: String,
    pub holds: bool,
    #[serde(skip)]
    pub exact: BigRational,
}

impl BoundCheck {
    fn new(name: &str, value: BigRational, relation: &'static str, bound: BigRational) -> Self {
        let holds = match relation {
            "<" => value < bound,
            "<=" => value <= bound,
            ">=" => value >= bound,
            ">" => value > bound,
            _ => unreachable!("unknown relation {relation}"),
        };
        BoundCheck {
            name: name.into(),
            value: format_sci(&value, SIG_DIGITS),
            relation,
            bound: format_sci(&bound, SIG_DIGITS),
            holds,
            exact: value,
        }
    }
}

const SIG_DIGITS: usize = 8;

/// Inputs to [`param_safety_report`].
#[derive(Debug, Clone)]
pub struct SafetyInputs {
    pub k: u64,
    pub alpha3: u64,
    /// Byzantine fraction of the sampled population.
    pub f_frac: BigRational,
    /// Lower bound on the fraction of processes already holding a longer final.
    pub good_frac: BigRational,
    pub gamma: u64,
    pub processes: u64,
    pub years: u64,
    pub rounds_per_second: u64,
}

impl Default for SafetyInputs {
    fn default() -> Self {
        SafetyInputs {
            k: 80,
            alpha3: 48,
            f_frac: ratio(1, 5),
            good_frac: ratio(3, 5),
            gamma: 300,
            processes: 10_000,
            years: 1000,
            rounds_per_second: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SafetyReport {
    pub k: u64,
    pub alpha3: u64,
    pub f_frac: String,
    pub gamma: u64,
    pub checks: Vec<BoundCheck>,
    pub notes: Vec<String>,
}

impl SafetyReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn check(&self, name: &str) -> Option<&BoundCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

impl fmt::Display for SafetyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "k={} alpha3={} f_frac={} gamma={}", self.k, self.alpha3, self.f_frac, self.gamma)?;
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        for c in &self.checks {
            writeln!(
                f,
                "  {:w$}  {} {:2} {}  [{}]",
                c.name,
                c.value,
                c.relation,
                c.bound,
                if c.holds { "ok" } else { "FAILS" },
            )?;
        }
        for n in &self.notes {
            writeln!(f, "  note: {n}")?;
        }
        Ok(())
    }
}

pub fn pow10(e: i32) -> BigRational {
    let ten = BigRational::from_integer(BigInt::from(10));
    if e >= 0 {
        Pow::pow(&ten, e as u32)
    } else {
        BigRational::one() / Pow::pow(&ten, (-e) as u32)
    }
}

pub fn param_safety_report(inp: &SafetyInputs) -> Result<SafetyReport> {
    let int = |v: u64| BigRational::from_integer(BigInt::from(v));
    let one_round = bin(&TailQuery::at_least(inp.k, inp.f_frac.clone(), inp.alpha3))?;
    let two_rounds = &one_round * &one_round;
    let seconds = 60 * 60 * 24 * 366 * inp.years;
    let envelope = int(inp.processes) * int(inp.rounds_per_second) * int(seconds);
    let union_stated = pow10(-28) * &envelope;
    let union_exact = &two_rounds * &envelope;

    let per_round_good = bin(&TailQuery::at_least(inp.k, inp.good_frac.clone(), inp.alpha3))?;
    let per_pair = &per_round_good * &per_round_good;
    let pairs = (inp.gamma / 2) as u32;
    let fail_from_pair_floor = Pow::pow(&(BigRational::one() - ratio(3, 10)), pairs);
    let fail_stated = Pow::pow(&ratio(71, 100), pairs);
    let fail_exact = Pow::pow(&(BigRational::one() - &per_pair), pairs);
    let fail_union = &fail_stated * int(inp.processes);

    let checks = vec![
        BoundCheck::new("one_round_byzantine_alpha3", one_round, "<", pow10(-14)),
        BoundCheck::new("two_round_byzantine_alpha3", two_rounds, "<", pow10(-28)),
        BoundCheck::new("union_with_stated_1e-28", union_stated, "<", ratio(2, 1) * pow10(-13)),
        BoundCheck::new("union_exact", union_exact, "<", ratio(2, 1) * pow10(-13)),
        BoundCheck::new("claim3_per_round_success", per_round_good, ">=", ratio(548, 1000)),
        BoundCheck::new("claim3_per_pair_success", per_pair, ">=", ratio(3, 10)),
        BoundCheck::new("claim3_fail_stated_0.71", fail_stated.clone(), "<", pow10(-22)),
        BoundCheck::new("claim3_fail_from_0.3", fail_from_pair_floor, "<", pow10(-22)),
        BoundCheck::new("claim3_fail_exact", fail_exact, "<", pow10(-22)),
        BoundCheck::new("claim3_fail_union_processes", fail_union, "<", pow10(-18)),
    ];
    let notes = vec![format!(
        "a per-pair success of at least 0.3 gives a per-pair failure of at most 0.7, not 0.71; \
         0.71^{pairs} is the looser of the two and is reported alongside (1-0.3)^{pairs}"
    )];
    Ok(SafetyReport {
        k: inp.k,
        alpha3: inp.alpha3,
        f_frac: inp.f_frac.to_string(),
        gamma: inp.gamma,
        checks,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct summation over every outcome sequence of `k` trials.
    fn enumerate(k: u64, x: &BigRational, pred: impl Fn(u64) -> bool) -> BigRational {
        let y = BigRational::one() - x;
        let mut total = BigRational::zero();
        for mask in 0u64..(1u64 << k) {
            let s = mask.count_ones() as u64;
            if pred(s) {
                total += Pow::pow(x, s as u32) * Pow::pow(&y, (k - s) as u32);
            }
        }
        total
    }

    #[test]
    fn reference_tail_values() {
        let p = bin(&TailQuery::at_least(80, ratio(1, 5), 48)).unwrap();
        assert!(p < pow10(-14));
        for k in [1, 7, 30] {
            assert_eq!(bin(&TailQuery::at_least(k, ratio(2, 7), 0)).unwrap(), BigRational::one());
        }
        assert_eq!(bin(&TailQuery::exactly(2, ratio(1, 2), 1)).unwrap(), ratio(1, 2));
    }

    #[test]
    fn invalid_queries_rejected() {
        assert!(bin(&TailQuery::at_least(5, ratio(3, 2), 1)).is_err());
        assert!(bin(&TailQuery::at_least(5, ratio(-1, 2), 1)).is_err());
        assert!(bin(&TailQuery::at_least(5, ratio(1, 2), 6)).is_err());
    }

    #[test]
    fn sci_format() {
        assert_eq!(format_sci(&ratio(1, 3), 4), "3.333e-1");
        assert_eq!(format_sci(&ratio(2, 3), 3), "6.67e-1");
        assert_eq!(format_sci(&ratio(9999, 1000), 3), "1.00e1");
        assert_eq!(format_sci(&ratio(12345, 1), 1), "1e4");
        assert_eq!(format_sci(&pow10(-30), 6), "1.00000e-30");
    }

    #[test]
    fn parse_decimal_is_exact() {
        assert_eq!(parse_rational("0.2").unwrap(), ratio(1, 5));
        assert_eq!(parse_rational("3/5").unwrap(), ratio(3, 5));
        assert_eq!(parse_rational("1").unwrap(), ratio(1, 1));
        assert!(parse_rational("0.2x").is_err());
        assert!(parse_rational("1/0").is_err());
    }

    #[test]
    fn default_report_holds() {
        let r = param_safety_report(&SafetyInputs::default()).unwrap();
        assert!(r.all_hold(), "{r}");
        // Cross-check against an independent f64 estimate.
        let p = to_f64(&r.check("one_round_byzantine_alpha3").unwrap().exact);
        assert!(p > 1e-17 && p < 1e-14, "{p}");
        let g = to_f64(&r.check("claim3_per_round_success").unwrap().exact);
        assert!((0.548..0.56).contains(&g), "{g}");
        let s = to_f64(&r.check("claim3_fail_stated_0.71").unwrap().exact);
        assert!((s.log10() - 150.0 * 0.71f64.log10()).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn agrees_with_enumeration(k in 0u64..=12, num in 0i64..=10, m in 0u64..=12) {
            let m = m.min(k);
            let x = ratio(num, 10);
            prop_assert_eq!(bin(&TailQuery::at_least(k, x.clone(), m)).unwrap(), enumerate(k, &x, |s| s >= m));
            prop_assert_eq!(bin(&TailQuery::at_most(k, x.clone(), m)).unwrap(), enumerate(k, &x, |s| s <= m));
            prop_assert_eq!(bin(&TailQuery::exactly(k, x.clone(), m)).unwrap(), enumerate(k, &x, |s| s == m));
        }

        #[test]
        fn tails_are_complementary(k in 1u64..=60, num in 0i64..=20, m in 1u64..=60) {
            let m = m.min(k);
            let x = ratio(num, 20);
            let hi = bin(&TailQuery::at_least(k, x.clone(), m)).unwrap();
            let lo = bin(&TailQuery::at_most(k, x, m - 1)).unwrap();
            prop_assert_eq!(hi + lo, BigRational::one());
        }

        #[test]
        fn monotone_in_x_and_m(k in 1u64..=40, a in 0i64..=20, b in 0i64..=20, m in 0u64..=40) {
            let m = m.min(k);
            let (lo, hi) = (a.min(b), a.max(b));
            let p_lo = bin_at_least(k, &ratio(lo, 20), m).unwrap();
            let p_hi = bin_at_least(k, &ratio(hi, 20), m).unwrap();
            prop_assert!(p_lo <= p_hi);
            let next = bin_at_least(k, &ratio(lo, 20), m + 1).unwrap();
            prop_assert!(next <= p_lo);
        }
    }
}
