use super::RiskError;

const MASS_TOL: f64 = 1e-9;

/// Finite distribution of returns: atoms sorted ascending by value, with
/// equal values merged.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnDistribution {
    atoms: Vec<(f64, f64)>,
}

impl ReturnDistribution {
    /// Build from `(value, probability)` pairs. Zero-probability atoms are
    /// dropped; the remaining mass must sum to 1 within 1e-9.
    pub fn from_atoms(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self, RiskError> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().filter(|&(_, p)| p != 0.0).collect();
        for &(v, p) in &atoms {
            if !v.is_finite() || !p.is_finite() || p < 0.0 {
                return Err(RiskError::BadAtom { value: v, prob: p });
            }
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(RiskError::Mass(total));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, f64)> = Vec::with_capacity(atoms.len());
        for (v, p) in atoms {
            match merged.last_mut() {
                Some(last) if last.0 == v => last.1 += p,
                _ => merged.push((v, p)),
            }
        }
        Ok(Self { atoms: merged })
    }

    pub fn point(value: f64) -> Self {
        Self {
            atoms: vec![(value, 1.0)],
        }
    }

    /// Equal-weight atoms over `values`.
    pub fn uniform(values: &[f64]) -> Result<Self, RiskError> {
        let p = 1.0 / values.len() as f64;
        Self::from_atoms(values.iter().map(|&v| (v, p)))
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.1).sum()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(v, p)| v * p).sum::<f64>() / self.total_mass()
    }

    pub fn min(&self) -> f64 {
        self.atoms[0].0
    }

    pub fn max(&self) -> f64 {
        self.atoms[self.atoms.len() - 1].0
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Result<Self, RiskError> {
        Self::from_atoms(self.atoms.iter().map(|&(v, p)| (f(v), p)))
    }

    pub fn negate(&self) -> Self {
        Self {
            atoms: self.atoms.iter().rev().map(|&(v, p)| (-v, p)).collect(),
        }
    }
}
