//! Synthetic day-ahead price data standing in for a real market dataset.
//!
//! Feature order (101 columns):
//!
//! | columns  | content                                   |
//! |----------|-------------------------------------------|
//! | 0..24    | previous day's hourly log-prices          |
//! | 24..48   | the day's hourly load forecast (GW)       |
//! | 48..72   | previous day's hourly temperature (°C)    |
//! | 72..96   | the day's hourly temperature forecast     |
//! | 96       | weekend indicator                         |
//! | 97       | US federal holiday indicator              |
//! | 98, 99   | sin / cos of day of year                  |
//! | 100      | years elapsed since 2011-01-01            |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{CroError, Result};
use crate::problems::data::Dataset;
use crate::tensor::Tensor;

pub const BATTERY_FEATURES: usize = 101;
const HOURS: usize = 24;
/// 2011-01-01 as days since the Unix epoch.
const START_DAY: i64 = 14975;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BatterySynthConfig {
    /// Probability that a day carries a price spike above 500 $/MWh.
    pub spike_prob: f64,
    /// Yearly drift in log-price (produces distribution shift over time).
    pub drift_per_year: f64,
    pub start_day: i64,
}

impl Default for BatterySynthConfig {
    fn default() -> Self {
        Self {
            spike_prob: 0.02,
            drift_per_year: 0.05,
            start_day: START_DAY,
        }
    }
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146097 + doe - 719468
}

pub fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719468;
    let era = z.div_euclid(146097);
    let doe = z - era * 146097;
    let yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

fn weekday(day: i64) -> i64 {
    // 1970-01-01 was a Thursday; 0 = Monday
    (day + 3).rem_euclid(7)
}

fn day_of_year(day: i64) -> i64 {
    let (y, _, _) = civil_from_days(day);
    day - days_from_civil(y, 1, 1)
}

fn nth_weekday(y: i64, m: u32, wd: i64, nth: i64) -> i64 {
    let first = days_from_civil(y, m, 1);
    let offset = (wd - weekday(first)).rem_euclid(7);
    first + offset + 7 * (nth - 1)
}

fn last_weekday(y: i64, m: u32, wd: i64) -> i64 {
    let next = if m == 12 {
        days_from_civil(y + 1, 1, 1)
    } else {
        days_from_civil(y, m + 1, 1)
    };
    let last = next - 1;
    last - (weekday(last) - wd).rem_euclid(7)
}

pub fn is_holiday(day: i64) -> bool {
    let (y, m, d) = civil_from_days(day);
    matches!((m, d), (1, 1) | (7, 4) | (11, 11) | (12, 25))
        || day == nth_weekday(y, 1, 0, 3)
        || day == nth_weekday(y, 2, 0, 3)
        || day == last_weekday(y, 5, 0)
        || day == nth_weekday(y, 9, 0, 1)
        || day == nth_weekday(y, 10, 0, 2)
        || day == nth_weekday(y, 11, 3, 4)
}

pub fn trend_feature(day: i64) -> f64 {
    (day - START_DAY) as f64 / 365.25
}

fn calendar(day: i64) -> [f64; 5] {
    let doy = day_of_year(day) as f64;
    let angle = 2.0 * std::f64::consts::PI * doy / 365.25;
    [
        f64::from(u8::from(weekday(day) >= 5)),
        f64::from(u8::from(is_holiday(day))),
        angle.sin(),
        angle.cos(),
        trend_feature(day),
    ]
}

/// Generates `n_days` consecutive days of prices and features.
pub fn synth_battery_data(seed: u64, n_days: usize, cfg: &BatterySynthConfig) -> Result<Dataset> {
    if n_days == 0 {
        return Err(CroError::InvalidArgument("n_days must be positive".into()));
    }
    if !(0.0..=1.0).contains(&cfg.spike_prob) {
        return Err(CroError::InvalidArgument(
            "spike_prob must lie in [0, 1]".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let heavy = StudentT::new(3.0).expect("student t");
    let total = n_days + 1;
    let mut temps: Vec<[f64; HOURS]> = Vec::with_capacity(total);
    let mut logp: Vec<[f64; HOURS]> = Vec::with_capacity(total);
    let mut loads: Vec<[f64; HOURS]> = Vec::with_capacity(total);
    let mut anomaly = 0.0;
    let mut price_state = 0.0;
    for k in 0..total {
        let day = cfg.start_day - 1 + k as i64;
        let doy = day_of_year(day) as f64;
        let seasonal = 12.0 - 13.0 * (2.0 * std::f64::consts::PI * (doy - 20.0) / 365.25).cos();
        anomaly = 0.7 * anomaly + 2.5 * unit.sample(&mut rng);
        let weekend = weekday(day) >= 5 || is_holiday(day);
        let years = trend_feature(day);
        let mut t = [0.0; HOURS];
        let mut load = [0.0; HOURS];
        let mut lp = [0.0; HOURS];
        price_state = 0.8 * price_state + 0.08 * unit.sample(&mut rng);
        let spike = rng.random::<f64>() < cfg.spike_prob;
        let spike_size = 2.8 + 0.6 * rng.random::<f64>();
        for h in 0..HOURS {
            let hf = h as f64;
            let diurnal = (2.0 * std::f64::consts::PI * (hf - 9.0) / 24.0).sin();
            t[h] = seasonal + anomaly + 5.0 * diurnal + 0.6 * unit.sample(&mut rng);
            let activity = if (7..22).contains(&h) { 1.0 } else { 0.0 };
            let comfort = 0.035 * (t[h] - 18.0).powi(2);
            load[h] = 70.0
                + 18.0 * activity * if weekend { 0.75 } else { 1.0 }
                + 8.0
                    * (2.0 * std::f64::consts::PI * (hf - 14.0) / 24.0)
                        .cos()
                        .max(0.0)
                + comfort
                + 1.5 * unit.sample(&mut rng);
            let mut v = 3.5
                + 0.012 * (load[h] - 80.0)
                + cfg.drift_per_year * years
                + price_state
                + 0.06 * heavy.sample(&mut rng);
            if spike && (12..21).contains(&h) {
                v += spike_size;
            }
            lp[h] = v;
        }
        temps.push(t);
        loads.push(load);
        logp.push(lp);
    }
    let mut xs = Vec::with_capacity(n_days);
    let mut ys = Vec::with_capacity(n_days);
    let mut ts = Vec::with_capacity(n_days);
    for k in 1..total {
        let day = cfg.start_day - 1 + k as i64;
        let mut x = Vec::with_capacity(BATTERY_FEATURES);
        x.extend_from_slice(&logp[k - 1]);
        x.extend_from_slice(&loads[k]);
        x.extend_from_slice(&temps[k - 1]);
        // forecast = realized temperature plus forecast error
        x.extend(temps[k].iter().map(|t| t + 0.8 * unit.sample(&mut rng)));
        x.extend_from_slice(&calendar(day));
        debug_assert_eq!(x.len(), BATTERY_FEATURES);
        xs.push(x);
        ys.push(logp[k].iter().map(|v| v.exp()).collect::<Vec<f64>>());
        ts.push(day);
    }
    Dataset::new(Tensor::from_rows(&xs)?, Tensor::from_rows(&ys)?, Some(ts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_roundtrip_and_weekday() {
        assert_eq!(days_from_civil(2011, 1, 1), START_DAY);
        assert_eq!(civil_from_days(START_DAY), (2011, 1, 1));
        // 2011-01-01 was a Saturday
        assert_eq!(weekday(START_DAY), 5);
        for day in 14000..17000 {
            let (y, m, d) = civil_from_days(day);
            assert_eq!(days_from_civil(y, m, d), day);
        }
    }

    #[test]
    fn holidays() {
        assert!(is_holiday(days_from_civil(2012, 7, 4)));
        // Thanksgiving 2013 was Nov 28
        assert!(is_holiday(days_from_civil(2013, 11, 28)));
        assert!(!is_holiday(days_from_civil(2013, 11, 27)));
    }

    #[test]
    fn generator_shape_and_determinism() {
        let cfg = BatterySynthConfig::default();
        let a = synth_battery_data(1, 30, &cfg).unwrap();
        let b = synth_battery_data(1, 30, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.x_dim(), BATTERY_FEATURES);
        assert_eq!(a.y_dim(), 24);
        assert!(a.y.data().iter().all(|p| *p > 0.0));
    }
}
