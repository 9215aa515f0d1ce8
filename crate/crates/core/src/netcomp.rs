//! Wireless throughput and compute-capability model for clients in a
//! single cell, plus the time estimates derived from them.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radio parameters of the cell. Throughput follows a capped Shannon form
/// `B * min(rho_max, log2(1 + SNR) / delta)` on top of the median urban
/// micro NLOS pathloss `36.7 log10(d) + 22.7 + 26 log10(f_GHz)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CellConfig {
    pub cell_radius_m: f64,
    pub carrier_freq_ghz: f64,
    pub bs_antenna_height_m: f64,
    pub client_antenna_height_m: f64,
    pub tx_power_dbm: f64,
    pub antenna_gain_dbi: f64,
    /// Bandwidth of the resource blocks assigned to one client.
    pub rb_bandwidth_hz: f64,
    pub capacity_loss: f64,
    /// Spectral efficiency cap, bit/s/Hz.
    pub spectral_cap: f64,
    /// Effective noise-plus-interference density. The default is calibrated
    /// so that the mean throughput over a uniform disc is about 1.4 Mbit/s.
    pub noise_density_dbm_per_hz: f64,
    pub noise_figure_db: f64,
    /// Validity floor of the pathloss model.
    pub min_distance_m: f64,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self {
            cell_radius_m: 2000.0,
            carrier_freq_ghz: 2.5,
            bs_antenna_height_m: 11.0,
            client_antenna_height_m: 1.0,
            tx_power_dbm: 20.0,
            antenna_gain_dbi: 0.0,
            rb_bandwidth_hz: 1.8e6,
            capacity_loss: 1.6,
            spectral_cap: 4.8,
            noise_density_dbm_per_hz: -188.0,
            noise_figure_db: 0.0,
            min_distance_m: 10.0,
        }
    }
}

impl CellConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("cell.cell_radius_m", self.cell_radius_m),
            ("cell.carrier_freq_ghz", self.carrier_freq_ghz),
            ("cell.bs_antenna_height_m", self.bs_antenna_height_m),
            ("cell.client_antenna_height_m", self.client_antenna_height_m),
            ("cell.rb_bandwidth_hz", self.rb_bandwidth_hz),
            ("cell.spectral_cap", self.spectral_cap),
            ("cell.min_distance_m", self.min_distance_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.capacity_loss >= 1.0 && self.capacity_loss.is_finite()) {
            return Err(Error::Config(format!(
                "cell.capacity_loss must be >= 1, got {}",
                self.capacity_loss
            )));
        }
        if self.min_distance_m >= self.cell_radius_m {
            return Err(Error::Config(
                "cell.min_distance_m must be below cell.cell_radius_m".into(),
            ));
        }
        for (name, v) in [
            ("cell.tx_power_dbm", self.tx_power_dbm),
            ("cell.antenna_gain_dbi", self.antenna_gain_dbi),
            (
                "cell.noise_density_dbm_per_hz",
                self.noise_density_dbm_per_hz,
            ),
            ("cell.noise_figure_db", self.noise_figure_db),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite")));
            }
        }
        Ok(())
    }

    /// Throughput ceiling `B * rho_max`.
    pub fn peak_throughput(&self) -> f64 {
        self.rb_bandwidth_hz * self.spectral_cap
    }

    fn noise_dbm(&self) -> f64 {
        self.noise_density_dbm_per_hz + 10.0 * self.rb_bandwidth_hz.log10() + self.noise_figure_db
    }
}

/// Median pathloss in dB. Distances under the model floor are clamped.
pub fn pathloss_db(distance_m: f64, cfg: &CellConfig) -> f64 {
    let d = if distance_m < cfg.min_distance_m {
        log::warn!(
            "distance {distance_m} m below pathloss floor, clamped to {} m",
            cfg.min_distance_m
        );
        cfg.min_distance_m
    } else {
        distance_m
    };
    36.7 * d.log10() + 22.7 + 26.0 * cfg.carrier_freq_ghz.log10()
}

pub fn snr_linear(distance_m: f64, cfg: &CellConfig) -> f64 {
    // Both ends use the same antenna gain.
    let rx = cfg.tx_power_dbm + 2.0 * cfg.antenna_gain_dbi - pathloss_db(distance_m, cfg);
    10f64.powf((rx - cfg.noise_dbm()) / 10.0)
}

pub fn throughput_from_snr(snr: f64, cfg: &CellConfig) -> f64 {
    let efficiency = ((1.0 + snr.max(0.0)).log2() / cfg.capacity_loss).min(cfg.spectral_cap);
    cfg.rb_bandwidth_hz * efficiency
}

/// Average throughput (bit/s) of a client at `distance_m` from the BS.
pub fn mean_throughput(distance_m: f64, cfg: &CellConfig) -> f64 {
    throughput_from_snr(snr_linear(distance_m, cfg), cfg)
}

/// Distances of `n` clients placed uniformly over the cell disc.
pub fn place_clients<R: Rng + ?Sized>(n: usize, cfg: &CellConfig, rng: &mut R) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            (cfg.cell_radius_m * u.sqrt()).max(cfg.min_distance_m)
        })
        .collect()
}

/// Long-term averages reported by a client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientResources {
    /// bit/s
    pub avg_throughput: f64,
    /// samples/s
    pub avg_capability: f64,
}

/// Places `n` clients and draws their average compute capability
/// uniformly from `capability_range`.
pub fn generate_resources<R: Rng + ?Sized>(
    n: usize,
    cfg: &CellConfig,
    capability_range: (f64, f64),
    rng: &mut R,
) -> Vec<ClientResources> {
    let distances = place_clients(n, cfg, rng);
    distances
        .into_iter()
        .map(|d| ClientResources {
            avg_throughput: mean_throughput(d, cfg),
            avg_capability: rng.random_range(capability_range.0..=capability_range.1),
        })
        .collect()
}

/// One realization of a fluctuating resource: `N(avg, (r_var * avg / 2)^2)`
/// truncated to `[(1 - r_var) avg, (1 + r_var) avg]`.
pub fn sample_round_value<R: Rng + ?Sized>(avg: f64, r_var: f64, rng: &mut R) -> f64 {
    debug_assert!(avg > 0.0 && (0.0..1.0).contains(&r_var));
    if r_var == 0.0 {
        return avg;
    }
    let lo = (1.0 - r_var) * avg;
    let hi = (1.0 + r_var) * avg;
    let normal = Normal::new(avg, r_var * avg / 2.0).expect("positive sd");
    // The interval spans +-2 sd, so about 95% of proposals are accepted.
    loop {
        let v = normal.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// Seconds needed to run `epochs` passes over `n_samples` at `capability`
/// samples/s.
pub fn update_time(n_samples: usize, epochs: usize, capability: f64) -> Result<f64> {
    if !(capability > 0.0) {
        return Err(Error::NonPositiveRate {
            what: "capability",
            value: capability,
        });
    }
    Ok((epochs * n_samples) as f64 / capability)
}

/// Seconds needed to send `payload_bytes` at `throughput` bit/s.
pub fn upload_time(payload_bytes: u64, throughput: f64) -> Result<f64> {
    if !(throughput > 0.0) {
        return Err(Error::NonPositiveRate {
            what: "throughput",
            value: throughput,
        });
    }
    Ok(8.0 * payload_bytes as f64 / throughput)
}
