use std::fmt;
use std::io::Write;

use coherence::channels::diamond_bounds_with_uncertainty;
use coherence::fitting::DecayModel;
use serde::Serialize;

use crate::build;
use crate::config::{ScenarioConfig, Table1Config};
use crate::error::Result;
use crate::run::benchmark;

/// One column of the error-budget table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table1Row {
    pub label: String,
    pub epsilon: f64,
    pub epsilon_sigma: f64,
    pub epsilon_in: f64,
    pub epsilon_in_sigma: f64,
    /// `epsilon - epsilon_in`.
    pub epsilon_coh: f64,
    pub epsilon_coh_sigma: f64,
    pub diamond_lower: f64,
    pub diamond_upper: f64,
    pub diamond_midpoint: f64,
    pub diamond_half_width: f64,
}

impl Table1Row {
    /// Derives the coherent part and the optimal diamond interval, widening the
    /// latter by the `epsilon_in` uncertainty.
    pub fn from_rates(label: &str, epsilon: f64, epsilon_sigma: f64, epsilon_in: f64, epsilon_in_sigma: f64) -> Result<Self> {
        let d = diamond_bounds_with_uncertainty(epsilon_in.max(0.0), epsilon_in_sigma)?;
        Ok(Self {
            label: label.to_string(),
            epsilon,
            epsilon_sigma,
            epsilon_in,
            epsilon_in_sigma,
            epsilon_coh: epsilon - epsilon_in,
            epsilon_coh_sigma: epsilon_sigma + epsilon_in_sigma,
            diamond_lower: d.lower,
            diamond_upper: d.upper,
            diamond_midpoint: d.midpoint,
            diamond_half_width: d.half_width,
        })
    }
}

impl fmt::Display for Table1Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} eps {:.4}({:.4})  eps_in {:.4}({:.4})  eps_coh {:.4}({:.4})  eps_diamond,opt {:.3}({:.3})",
            self.label,
            self.epsilon,
            self.epsilon_sigma,
            self.epsilon_in,
            self.epsilon_in_sigma,
            self.epsilon_coh,
            self.epsilon_coh_sigma,
            self.diamond_midpoint,
            self.diamond_half_width
        )
    }
}

/// Scenario `i` uses seeds `seed + 2i` (RB) and `seed + 2i + 1` (PB).
pub fn pipeline_table1(cfg: &Table1Config, seed: u64) -> Result<Vec<Table1Row>> {
    cfg.scenarios
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rb_seed = seed.wrapping_add(2 * i as u64);
            let (label, models, design) = match s {
                ScenarioConfig::Measured {
                    label,
                    epsilon,
                    epsilon_sigma,
                    epsilon_in,
                    epsilon_in_sigma,
                } => return Table1Row::from_rates(label, *epsilon, *epsilon_sigma, *epsilon_in, *epsilon_in_sigma),
                ScenarioConfig::Simulated { label, noise, design } => (label, vec![(1.0, build::noise(noise)?)], design),
                ScenarioConfig::Lindblad { label, config } => (label, build::lindblad_ensemble(config)?, &config.design),
            };
            let rb = benchmark(&models, design, DecayModel::Rb, rb_seed)?.fit;
            let pb = benchmark(&models, design, DecayModel::Pb, rb_seed.wrapping_add(1))?.fit;
            Table1Row::from_rates(
                label,
                rb.rate_param,
                rb.sigma.rate_param,
                pb.error_per_gate(),
                pb.error_per_gate_sigma(),
            )
        })
        .collect()
}

pub fn write_table1_csv<W: Write>(rows: &[Table1Row], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(coherence::Error::from)?;
    }
    w.flush().map_err(coherence::Error::from)?;
    Ok(())
}
