use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Annotation detail level fed to the denoiser.
///
/// `Disabled` is the sentinel used when a dataset carries a single annotator
/// or all label counts coincide; the granularity embedding is then forced to
/// an exact zero vector.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Level(f64),
    Disabled,
}

impl Granularity {
    pub fn new(g: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&g) {
            return Err(invalid(format!("granularity {g} outside [0, 1]")));
        }
        Ok(Granularity::Level(g))
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Granularity::Level(g) => Some(g),
            Granularity::Disabled => None,
        }
    }

    pub fn is_disabled(&self) -> bool {
        matches!(self, Granularity::Disabled)
    }

    /// Uniform grid `k / (m - 1)` for `k = 0..m`.
    pub fn grid(m: usize) -> Result<Vec<Granularity>> {
        if m < 2 {
            return Err(invalid(format!("sweep needs at least 2 granularities, got {m}")));
        }
        Ok((0..m)
            .map(|k| Granularity::Level(k as f64 / (m - 1) as f64))
            .collect())
    }

    /// Filename tag: `g050` for 0.5, `g100` for 1.0, `gnone` for the sentinel.
    pub fn file_tag(&self) -> String {
        match *self {
            Granularity::Level(g) => format!("g{:03}", (g * 100.0).round() as u32),
            Granularity::Disabled => "gnone".to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_of_eleven() {
        let grid = Granularity::grid(11).unwrap();
        let values: Vec<f64> = grid.iter().map(|g| g.value().unwrap()).collect();
        let expected = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        assert_eq!(values.len(), 11);
        for (v, e) in values.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_of_two_and_invalid() {
        let grid = Granularity::grid(2).unwrap();
        assert_eq!(grid, vec![Granularity::Level(0.0), Granularity::Level(1.0)]);
        assert!(Granularity::grid(1).is_err());
    }

    #[test]
    fn tags() {
        assert_eq!(Granularity::Level(0.5).file_tag(), "g050");
        assert_eq!(Granularity::Level(1.0).file_tag(), "g100");
        assert_eq!(Granularity::Level(0.0).file_tag(), "g000");
        assert_eq!(Granularity::Disabled.file_tag(), "gnone");
    }

    #[test]
    fn out_of_range_rejected() {
        assert!(Granularity::new(1.2).is_err());
        assert!(Granularity::new(-0.1).is_err());
        assert!(Granularity::new(0.3).is_ok());
    }
}
