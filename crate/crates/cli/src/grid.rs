//! Sweep grid syntax: `kappa=1e-7,1e-5;lambda=1e-5;eta=1e-5,1e-3`.
//!
//! Axes are separated by `;`, values by `,`. An axis left out stays at the
//! center point (the default weight), so a one-axis grid sweeps that axis
//! alone.

use anyhow::{bail, ensure, Result};
use cdg_core::losses::CcdWeights;

#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub kappa: Vec<f64>,
    pub lambda: Vec<f64>,
    pub eta: Vec<f64>,
}

impl SweepGrid {
    pub fn parse(text: &str) -> Result<SweepGrid> {
        if text.trim().is_empty() {
            bail!("empty grid");
        }
        let center = CcdWeights::default();
        let (mut kappa, mut lambda, mut eta) = (None, None, None);
        for axis in text.split(';') {
            let axis = axis.trim();
            if axis.is_empty() {
                bail!("empty axis in grid {text:?}");
            }
            let (name, values) = axis
                .split_once('=')
                .ok_or_else(|| anyhow::anyhow!("axis {axis:?} is not name=v1,v2,..."))?;
            let parsed = parse_values(values)
                .map_err(|e| anyhow::anyhow!("axis {}: {e}", name.trim()))?;
            let slot = match name.trim() {
                "kappa" => &mut kappa,
                "lambda" => &mut lambda,
                "eta" => &mut eta,
                other => bail!("unknown grid axis {other:?} (kappa, lambda, eta)"),
            };
            ensure!(slot.is_none(), "axis {} given twice", name.trim());
            *slot = Some(parsed);
        }
        Ok(SweepGrid {
            kappa: kappa.unwrap_or_else(|| vec![center.kappa]),
            lambda: lambda.unwrap_or_else(|| vec![center.lambda]),
            eta: eta.unwrap_or_else(|| vec![center.eta]),
        })
    }

    pub fn len(&self) -> usize {
        self.kappa.len() * self.lambda.len() * self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cartesian product, kappa-major.
    pub fn points(&self) -> Vec<CcdWeights> {
        let mut out = Vec::with_capacity(self.len());
        for &kappa in &self.kappa {
            for &lambda in &self.lambda {
                for &eta in &self.eta {
                    out.push(CcdWeights { kappa, lambda, eta });
                }
            }
        }
        out
    }
}

fn parse_values(values: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for v in values.split(',') {
        let v = v.trim();
        if v.is_empty() {
            bail!("empty value");
        }
        let x: f64 = v.parse().map_err(|_| anyhow::anyhow!("{v:?} is not a number"))?;
        ensure!(x.is_finite() && x > 0.0, "{v:?} is not a positive real");
        out.push(x);
    }
    ensure!(!out.is_empty(), "no values");
    Ok(out)
}
