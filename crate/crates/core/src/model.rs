//! Population-structured reaction networks: species, reactions, stoichiometry
//! and separable propensity functions.

use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::rates::{DimPlan, Kernel, RangeSumPlan};

#[derive(Clone, Debug, PartialEq)]
pub struct Species {
    pub name: String,
    pub index: usize,
}

/// A single-species factor of a custom propensity.
#[derive(Clone, Debug, PartialEq)]
pub struct CustomFactor {
    pub species: usize,
    pub kernel: Kernel,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PropensitySpec {
    /// `c · ∏_ℓ C(x_ℓ, v⁻_ℓ)`.
    MassAction { rate: f64 },
    /// `ρ / (1 + x_s) · ∏_ℓ C(x_ℓ, v⁻_ℓ)`; the repressor `s` may not be a reactant.
    Hill { numerator: f64, species: usize },
    /// `scale · ∏ f_i(x_{s_i})`, zero whenever a reactant is missing.
    Custom { scale: f64, factors: Vec<CustomFactor> },
}

#[derive(Clone, Debug)]
pub struct Reaction {
    name: String,
    loss: Vec<u32>,
    gain: Vec<u32>,
    change: Vec<i64>,
    propensity: PropensitySpec,
    plan: RangeSumPlan,
}

impl PartialEq for Reaction {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name
            && self.loss == other.loss
            && self.gain == other.gain
            && self.propensity == other.propensity
    }
}

impl Reaction {
    pub fn new(name: impl Into<String>, loss: Vec<u32>, gain: Vec<u32>, propensity: PropensitySpec) -> Result<Self> {
        let name = name.into();
        if loss.len() != gain.len() {
            return Err(Error::DimensionMismatch {
                expected: loss.len(),
                got: gain.len(),
            });
        }
        if loss.iter().chain(&gain).all(|&c| c == 0) {
            return Err(Error::InvalidModel(format!("reaction {name} has neither reactants nor products")));
        }
        let change = gain.iter().zip(&loss).map(|(&g, &l)| g as i64 - l as i64).collect();
        let plan = build_plan(&name, &loss, &propensity)?;
        Ok(Self {
            name,
            loss,
            gain,
            change,
            propensity,
            plan,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn loss(&self) -> &[u32] {
        &self.loss
    }

    pub fn gain(&self) -> &[u32] {
        &self.gain
    }

    /// Net stoichiometric change `v⁺ − v⁻`.
    pub fn change(&self) -> &[i64] {
        &self.change
    }

    pub fn propensity_spec(&self) -> &PropensitySpec {
        &self.propensity
    }

    pub fn plan(&self) -> &RangeSumPlan {
        &self.plan
    }

    /// Rate of this reaction in micro-state `x`.
    pub fn propensity(&self, x: &[i64]) -> Result<f64> {
        if x.len() != self.loss.len() {
            return Err(Error::DimensionMismatch {
                expected: self.loss.len(),
                got: x.len(),
            });
        }
        if let Some((dim, &value)) = x.iter().enumerate().find(|(_, &v)| v < 0) {
            return Err(Error::NegativeState { dim, value });
        }
        Ok(self.plan.evaluate(x))
    }
}

pub fn stoichiometric_change(reaction: &Reaction) -> Vec<i64> {
    reaction.change.clone()
}

fn positive(name: &str, what: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("reaction {name}: {what} must be positive and finite, got {v}")))
    }
}

fn build_plan(name: &str, loss: &[u32], spec: &PropensitySpec) -> Result<RangeSumPlan> {
    let mut dims: Vec<DimPlan> = loss
        .iter()
        .map(|&k| DimPlan {
            kernel: if k == 0 { Kernel::Count } else { Kernel::Binomial(k) },
            min: k as i64,
        })
        .collect();
    let scale = match spec {
        PropensitySpec::MassAction { rate } => {
            positive(name, "rate constant", *rate)?;
            *rate
        }
        PropensitySpec::Hill { numerator, species } => {
            positive(name, "Hill numerator", *numerator)?;
            let dim = dims
                .get_mut(*species)
                .ok_or_else(|| Error::InvalidModel(format!("reaction {name}: Hill species {species} out of range")))?;
            if loss[*species] > 0 {
                return Err(Error::InvalidModel(format!(
                    "reaction {name}: Hill repressor may not also be a reactant (propensity would not factor)"
                )));
            }
            dim.kernel = Kernel::Reciprocal(1.0);
            *numerator
        }
        PropensitySpec::Custom { scale, factors } => {
            positive(name, "custom scale", *scale)?;
            for d in dims.iter_mut() {
                d.kernel = Kernel::Count;
            }
            let mut seen = HashSet::new();
            for f in factors {
                if !seen.insert(f.species) {
                    return Err(Error::InvalidModel(format!(
                        "reaction {name}: more than one custom factor on species {}",
                        f.species
                    )));
                }
                let dim = dims.get_mut(f.species).ok_or_else(|| {
                    Error::InvalidModel(format!("reaction {name}: factor species {} out of range", f.species))
                })?;
                match f.kernel {
                    Kernel::Reciprocal(o) if !(o.is_finite() && o > 0.0) => {
                        return Err(Error::InvalidModel(format!("reaction {name}: reciprocal offset must be positive")))
                    }
                    Kernel::Exp(r) if !r.is_finite() => {
                        return Err(Error::InvalidModel(format!("reaction {name}: exponential rate must be finite")))
                    }
                    Kernel::Count => {
                        return Err(Error::InvalidModel(format!("reaction {name}: empty custom factor")))
                    }
                    _ => {}
                }
                dim.kernel = f.kernel;
            }
            *scale
        }
    };
    Ok(RangeSumPlan { scale, dims })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReactionNetwork {
    species: Vec<Species>,
    reactions: Vec<Reaction>,
    parameters: BTreeMap<String, f64>,
}

impl ReactionNetwork {
    pub fn new(species: Vec<String>, reactions: Vec<Reaction>, parameters: BTreeMap<String, f64>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &species {
            if !seen.insert(s.as_str()) {
                return Err(Error::InvalidModel(format!("duplicate species {s}")));
            }
        }
        if reactions.is_empty() {
            return Err(Error::InvalidModel("network needs at least one reaction".into()));
        }
        for r in &reactions {
            if r.loss.len() != species.len() {
                return Err(Error::DimensionMismatch {
                    expected: species.len(),
                    got: r.loss.len(),
                });
            }
        }
        let species = species
            .into_iter()
            .enumerate()
            .map(|(index, name)| Species { name, index })
            .collect();
        Ok(Self {
            species,
            reactions,
            parameters,
        })
    }

    pub fn species(&self) -> &[Species] {
        &self.species
    }

    pub fn species_index(&self, name: &str) -> Option<usize> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn reactions(&self) -> &[Reaction] {
        &self.reactions
    }

    pub fn parameters(&self) -> &BTreeMap<String, f64> {
        &self.parameters
    }

    pub fn dims(&self) -> usize {
        self.species.len()
    }
}
