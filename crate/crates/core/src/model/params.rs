use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Ecological and economic coefficients of the vegetation/soil-water harvesting model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParameterSet<T> {
    /// growth coefficient in `g w v^eta`
    pub g: T,
    pub eta: T,
    /// death rate `d (1 + delta v)`
    pub d: T,
    pub delta: T,
    /// infiltration `beta + xi v`
    pub beta: T,
    pub xi: T,
    /// rainfall `R`
    pub rain: T,
    /// water loss `r_u v + r_w`
    pub r_u: T,
    pub r_w: T,
    pub d1: T,
    pub d2: T,
    /// discount rate
    pub rho: T,
    /// harvesting cost
    pub c: T,
    /// price
    pub p: T,
    /// Cobb-Douglas elasticity
    pub alpha: T,
}

/// Names accepted in `key = value` sections, in output order.
pub const PARAM_KEYS: [&str; 15] =
    ["g", "eta", "d", "delta", "beta", "xi", "R", "r_u", "r_w", "d1", "d2", "rho", "c", "p", "alpha"];

impl<T: Scalar> Default for ParameterSet<T> {
    fn default() -> Self {
        Self {
            g: T::lit(0.001),
            eta: T::lit(0.5),
            d: T::lit(0.03),
            delta: T::lit(0.005),
            beta: T::lit(0.9),
            xi: T::lit(0.001),
            rain: T::lit(34.0),
            r_u: T::lit(0.01),
            r_w: T::lit(0.1),
            d1: T::lit(0.05),
            d2: T::lit(10.0),
            rho: T::lit(0.03),
            c: T::lit(1.0),
            p: T::lit(1.1),
            alpha: T::lit(0.3),
        }
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn with_rain(mut self, rain: T) -> Self {
        self.rain = rain;
        self
    }

    pub fn get(&self, key: &str) -> Option<T> {
        Some(match key {
            "g" => self.g,
            "eta" => self.eta,
            "d" => self.d,
            "delta" => self.delta,
            "beta" => self.beta,
            "xi" => self.xi,
            "R" | "rain" => self.rain,
            "r_u" => self.r_u,
            "r_w" => self.r_w,
            "d1" => self.d1,
            "d2" => self.d2,
            "rho" => self.rho,
            "c" => self.c,
            "p" => self.p,
            "alpha" => self.alpha,
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, value: T) -> Result<()> {
        let slot = match key {
            "g" => &mut self.g,
            "eta" => &mut self.eta,
            "d" => &mut self.d,
            "delta" => &mut self.delta,
            "beta" => &mut self.beta,
            "xi" => &mut self.xi,
            "R" | "rain" => &mut self.rain,
            "r_u" => &mut self.r_u,
            "r_w" => &mut self.r_w,
            "d1" => &mut self.d1,
            "d2" => &mut self.d2,
            "rho" => &mut self.rho,
            "c" => &mut self.c,
            "p" => &mut self.p,
            "alpha" => &mut self.alpha,
            _ => return Err(Error::InvalidArgument(format!("unknown parameter `{key}`"))),
        };
        *slot = value;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let zero = T::zero();
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.alpha > zero && self.alpha < T::one()) {
            return bad("alpha must lie in (0, 1)");
        }
        if !(self.rho > zero) {
            return bad("rho must be positive");
        }
        if !(self.d1 > zero && self.d2 > zero) {
            return bad("diffusion constants must be positive");
        }
        if !(self.c > zero && self.p > zero) {
            return bad("c and p must be positive");
        }
        let rates = [self.g, self.eta, self.d, self.delta, self.beta, self.xi, self.rain, self.r_u, self.r_w];
        if rates.iter().any(|&x| !(x >= zero)) {
            return bad("ecological rates must be nonnegative");
        }
        Ok(())
    }

    /// Private harvesting intensity `gamma = (p (1 - alpha) / c)^(1/alpha)`.
    pub fn private_gamma(&self) -> T {
        (self.p * (T::one() - self.alpha) / self.c).powf(T::one() / self.alpha)
    }

    /// Effective extra death rate of private optimization, `A = gamma^(1 - alpha)`.
    pub fn private_harvest_coefficient(&self) -> T {
        self.private_gamma().powf(T::one() - self.alpha)
    }

    /// Open access intensity `(c/p)^(-1/alpha)`.
    pub fn open_access_gamma(&self) -> T {
        (self.c / self.p).powf(-T::one() / self.alpha)
    }

    /// `key = value` lines, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in PARAM_KEYS {
            let _ = writeln!(s, "{k} = {:.16e}", self.get(k).unwrap().to_f64_lossy());
        }
        s
    }

    /// Parses `key = value` lines on top of the defaults. Unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut p = Self::default();
        p.apply_text(text, 0)?;
        Ok(p)
    }

    /// Applies `key = value` lines; `first_line` offsets the reported line numbers.
    pub fn apply_text(&mut self, text: &str, first_line: usize) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let lno = first_line + i + 1;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: lno, msg: format!("expected key = value, got `{line}`") })?;
            let value: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line: lno, msg: format!("bad number `{}`", v.trim()) })?;
            self.set(k.trim(), T::lit(value))
                .map_err(|e| Error::Parse { line: lno, msg: e.to_string() })?;
        }
        self.validate()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        let f = |x: T| U::lit(x.to_f64_lossy());
        ParameterSet {
            g: f(self.g),
            eta: f(self.eta),
            d: f(self.d),
            delta: f(self.delta),
            beta: f(self.beta),
            xi: f(self.xi),
            rain: f(self.rain),
            r_u: f(self.r_u),
            r_w: f(self.r_w),
            d1: f(self.d1),
            d2: f(self.d2),
            rho: f(self.rho),
            c: f(self.c),
            p: f(self.p),
            alpha: f(self.alpha),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn private_coefficient() {
        let p = ParameterSet::<f64>::default();
        assert!((p.private_harvest_coefficient() - 0.543).abs() < 5e-4);
        assert!((p.private_gamma() - 0.77f64.powf(1.0 / 0.3)).abs() < 1e-15);
    }

    #[test]
    fn text_round_trip_and_rejections() {
        let mut p = ParameterSet::<f64>::default();
        p.rain = 28.0;
        let back = ParameterSet::<f64>::from_text(&p.to_text()).unwrap();
        assert_eq!(back, p);
        assert!(matches!(ParameterSet::<f64>::from_text("R = 3\nfoo = 1"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(ParameterSet::<f64>::from_text("alpha = 1.5"), Err(Error::InvalidArgument(_))));
        assert!(ParameterSet::<f64>::from_text("# comment\n\nR = 10 # trailing\n").unwrap().rain == 10.0);
    }
}
