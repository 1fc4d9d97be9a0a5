//! JSON descriptors for the built-in parametric families.
//!
//! ```json
//! {
//!   "kind": "lq",
//!   "n": 1, "d": 1, "control_split": [1, 0],
//!   "a": [0.1], "abar": [-0.2], "c": [1.0],
//!   "sigma0": [0.3], "sigma1": [0.1], "sigma2": [0.0],
//!   "q": [1.0], "qbar": [0.5], "r": [1.0], "h": [1.0], "hbar": [0.5],
//!   "jump_atoms": [{"mark": [1.0], "weight": 2.0, "gamma0": [0.1], "gamma1": [0.1], "gamma2": [-0.05]}],
//!   "constants": {"lambda_v": 0.5}
//! }
//! ```
//!
//! Coefficients are diagonal: each may be given as `n` diagonal entries or as a
//! row-major `n x n` matrix whose off-diagonal entries vanish. `"example_drift"`
//! replaces the linear drift by the exponential example with parameter `epsilon`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lqoracle::{example_model, ControlledSigma, LqJump, LqSpec};
use crate::model::{DiffusionColumn, JumpMeasure, ModelSpec, PerturbedJacobian};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Lq,
    ExampleDrift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpAtomDescriptor {
    pub mark: Vec<f64>,
    pub weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma1: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma2: Option<Vec<f64>>,
}

/// Overrides of the structural constants implied by the coefficients.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantsOverride {
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub big_l: Option<f64>,
    #[serde(rename = "L0", default, skip_serializing_if = "Option::is_none")]
    pub l0: Option<f64>,
    #[serde(rename = "L1", default, skip_serializing_if = "Option::is_none")]
    pub l1: Option<f64>,
    #[serde(rename = "L2", default, skip_serializing_if = "Option::is_none")]
    pub l2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_m: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
}

/// Shifts one entry of an analytic Jacobian so the derivative checker has something to find.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultInjection {
    /// `"drift_dx"` or `"drift_dv"`.
    pub callback: String,
    #[serde(default)]
    pub row: usize,
    #[serde(default)]
    pub col: usize,
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub kind: ModelKind,
    pub n: usize,
    pub d: usize,
    pub control_split: Vec<usize>,
    #[serde(default)]
    pub a: Vec<f64>,
    #[serde(default)]
    pub abar: Vec<f64>,
    #[serde(default)]
    pub c: Vec<f64>,
    pub sigma0: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub q: Vec<f64>,
    pub qbar: Vec<f64>,
    pub r: Vec<f64>,
    pub h: Vec<f64>,
    pub hbar: Vec<f64>,
    #[serde(default)]
    pub jump_atoms: Vec<JumpAtomDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled_sigma: Option<ControlledSigma>,
    #[serde(default)]
    pub constants: ConstantsOverride,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fault: Option<FaultInjection>,
}

/// Model, jump measure and, for the linear-quadratic family, its oracle data.
#[derive(Clone, Debug)]
pub struct ProblemData {
    pub model: ModelSpec,
    pub jumps: JumpMeasure,
    pub lq: Option<LqSpec>,
}

/// Diagonal of a coefficient given as `n` entries or a row-major diagonal `n x n` matrix.
fn diagonal(path: &str, v: &[f64], n: usize) -> Result<Vec<f64>> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::config(format!("{path}[{i}]"), "must be finite"));
    }
    if v.len() == n {
        return Ok(v.to_vec());
    }
    if v.len() == n * n {
        for r in 0..n {
            for c in 0..n {
                if r != c && v[r * n + c] != 0.0 {
                    return Err(Error::config(
                        format!("{path}[{}]", r * n + c),
                        "only diagonal coefficient matrices are supported",
                    ));
                }
            }
        }
        return Ok((0..n).map(|i| v[i * n + i]).collect());
    }
    Err(Error::config(path, format!("expected {n} diagonal entries or {} matrix entries, got {}", n * n, v.len())))
}

fn prefix(e: Error) -> Error {
    match e {
        Error::Config { path, message } => Error::config(format!("model.{path}"), message),
        other => other,
    }
}

impl ModelDescriptor {
    /// Descriptor of an [`LqSpec`].
    pub fn from_lq(spec: &LqSpec) -> Self {
        let n = spec.dim();
        let mut split = vec![n];
        split.extend(std::iter::repeat(usize::from(spec.controlled_sigma.is_some())).take(n));
        ModelDescriptor {
            kind: ModelKind::Lq,
            n,
            d: split.iter().sum(),
            control_split: split,
            a: spec.a.clone(),
            abar: spec.abar.clone(),
            c: spec.c.clone(),
            sigma0: spec.sigma0.clone(),
            sigma1: spec.sigma1.clone(),
            sigma2: spec.sigma2.clone(),
            q: spec.q.clone(),
            qbar: spec.qbar.clone(),
            r: spec.r.clone(),
            h: spec.h.clone(),
            hbar: spec.hbar.clone(),
            jump_atoms: spec
                .jumps
                .iter()
                .map(|j| JumpAtomDescriptor {
                    mark: j.mark.clone(),
                    weight: j.weight,
                    gamma0: Some(j.gamma0.clone()),
                    gamma1: Some(j.gamma1.clone()),
                    gamma2: Some(j.gamma2.clone()),
                })
                .collect(),
            epsilon: None,
            controlled_sigma: spec.controlled_sigma.clone(),
            constants: ConstantsOverride::default(),
            fault: None,
        }
    }

    /// The linear-quadratic data; for the example drift `a`, `abar`, `c` are fixed to 1.
    pub fn lq_spec(&self) -> Result<LqSpec> {
        let n = self.n;
        if n == 0 {
            return Err(Error::config("model.n", "must be positive"));
        }
        let coeff = |name: &str, v: &[f64]| diagonal(&format!("model.{name}"), v, n);
        let (a, abar, c) = match self.kind {
            ModelKind::Lq => (coeff("a", &self.a)?, coeff("abar", &self.abar)?, coeff("c", &self.c)?),
            ModelKind::ExampleDrift => {
                for (name, v) in [("a", &self.a), ("abar", &self.abar), ("c", &self.c)] {
                    if !v.is_empty() {
                        return Err(Error::config(format!("model.{name}"), "is fixed by the example drift"));
                    }
                }
                (vec![1.0; n], vec![1.0; n], vec![1.0; n])
            }
        };
        let mut jumps = Vec::with_capacity(self.jump_atoms.len());
        for (k, j) in self.jump_atoms.iter().enumerate() {
            let g = |name: &str, v: &Option<Vec<f64>>| match v {
                Some(v) => diagonal(&format!("model.jump_atoms[{k}].{name}"), v, n),
                None => Ok(vec![0.0; n]),
            };
            if j.mark.is_empty() || j.mark.iter().all(|m| *m == 0.0) {
                return Err(Error::config(format!("model.jump_atoms[{k}].mark"), "must be a non-zero vector"));
            }
            jumps.push(LqJump {
                mark: j.mark.clone(),
                weight: j.weight,
                gamma0: g("gamma0", &j.gamma0)?,
                gamma1: g("gamma1", &j.gamma1)?,
                gamma2: g("gamma2", &j.gamma2)?,
            });
        }
        let spec = LqSpec {
            a,
            abar,
            c,
            sigma0: coeff("sigma0", &self.sigma0)?,
            sigma1: coeff("sigma1", &self.sigma1)?,
            sigma2: coeff("sigma2", &self.sigma2)?,
            q: coeff("q", &self.q)?,
            qbar: coeff("qbar", &self.qbar)?,
            r: coeff("r", &self.r)?,
            h: coeff("h", &self.h)?,
            hbar: coeff("hbar", &self.hbar)?,
            jumps,
            controlled_sigma: self.controlled_sigma.clone(),
        };
        spec.validate().map_err(prefix)?;
        Ok(spec)
    }

    fn check_split(&self) -> Result<()> {
        let n = self.n;
        if self.control_split.len() != n + 1 {
            return Err(Error::config("model.control_split", format!("expected n + 1 = {} entries", n + 1)));
        }
        let controlled = usize::from(self.controlled_sigma.is_some());
        let d0 = match self.kind {
            ModelKind::Lq => n,
            ModelKind::ExampleDrift => 1,
        };
        if self.control_split[0] != d0 {
            return Err(Error::config("model.control_split[0]", format!("the {:?} family has d_0 = {d0}", self.kind)));
        }
        for j in 1..=n {
            if self.control_split[j] != controlled {
                return Err(Error::config(
                    format!("model.control_split[{j}]"),
                    format!("expected {controlled} (diffusion control {})", if controlled == 1 { "on" } else { "off" }),
                ));
            }
        }
        let total: usize = self.control_split.iter().sum();
        if self.d != total {
            return Err(Error::config("model.d", format!("control_split sums to {total}")));
        }
        Ok(())
    }

    /// Validates the descriptor and assembles the model.
    pub fn build(&self) -> Result<ProblemData> {
        let spec = self.lq_spec()?;
        self.check_split()?;
        let mut model = match self.kind {
            ModelKind::Lq => {
                if self.epsilon.is_some() {
                    return Err(Error::config("model.epsilon", "only applies to the example_drift family"));
                }
                spec.model().map_err(prefix)?
            }
            ModelKind::ExampleDrift => {
                let eps = self.epsilon.unwrap_or(0.0);
                if !(eps.abs() <= 1.0) {
                    return Err(Error::config("model.epsilon", "must satisfy |epsilon| <= 1"));
                }
                example_model(eps, &spec).map_err(|e| match e {
                    Error::Domain(m) => Error::config("model", m),
                    other => prefix(other),
                })?
            }
        };
        let o = &self.constants;
        let c = &mut model.constants;
        let set = |dst: &mut f64, v: Option<f64>, name: &str| -> Result<()> {
            if let Some(v) = v {
                if !v.is_finite() {
                    return Err(Error::config(format!("model.constants.{name}"), "must be finite"));
                }
                *dst = v;
            }
            Ok(())
        };
        set(&mut c.big_l, o.big_l, "L")?;
        set(&mut c.l0, o.l0, "L0")?;
        set(&mut c.l1, o.l1, "L1")?;
        set(&mut c.l2, o.l2, "L2")?;
        set(&mut c.lambda0, o.lambda0, "lambda0")?;
        set(&mut c.lambda_v, o.lambda_v, "lambda_v")?;
        set(&mut c.lambda_x, o.lambda_x, "lambda_x")?;
        set(&mut c.lambda_m, o.lambda_m, "lambda_m")?;
        if let Some(l) = o.l {
            c.l = l;
        }
        for (name, v) in [("L", c.big_l), ("L0", c.l0), ("L1", c.l1), ("L2", c.l2)] {
            if v < 0.0 {
                return Err(Error::config(format!("model.constants.{name}"), "must be non-negative"));
            }
        }
        if c.lambda0 <= 0.0 {
            return Err(Error::config("model.constants.lambda0", "must be positive"));
        }
        if c.lambda_v < 0.0 {
            return Err(Error::config("model.constants.lambda_v", "must be non-negative"));
        }
        if c.l != model.controlled_columns() {
            return Err(Error::config("model.constants.l", format!("{} columns are controlled", model.controlled_columns())));
        }
        if let Some(f) = &self.fault {
            let a = model.drift.args();
            let col = match f.callback.as_str() {
                "drift_dx" => a.x_range().start + f.col,
                "drift_dv" => a.v_range().start + f.col,
                other => {
                    return Err(Error::config("model.fault.callback", format!("unknown callback `{other}`")));
                }
            };
            if f.row >= model.n || col >= a.total() {
                return Err(Error::config("model.fault", "entry outside the Jacobian"));
            }
            model.drift = Arc::new(PerturbedJacobian { inner: model.drift.clone(), row: f.row, col, offset: f.offset });
        }
        if model.columns.iter().any(|c| matches!(c, DiffusionColumn::Controlled { .. })) && self.kind != ModelKind::Lq {
            return Err(Error::config("model.controlled_sigma", "only the lq family supports diffusion control"));
        }
        let jumps = spec.jump_measure().map_err(|e| Error::config("model.jump_atoms", e.to_string()))?;
        let lq = (self.kind == ModelKind::Lq).then_some(spec);
        Ok(ProblemData { model, jumps, lq })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lq_json() -> serde_json::Value {
        serde_json::to_value(ModelDescriptor::from_lq(&LqSpec::fixture_with_jump())).unwrap()
    }

    #[test]
    fn round_trip_preserves_the_descriptor() {
        let d: ModelDescriptor = serde_json::from_value(lq_json()).unwrap();
        let back: ModelDescriptor = serde_json::from_str(&serde_json::to_string(&d).unwrap()).unwrap();
        assert_eq!(d, back);
        let built = d.build().unwrap();
        assert_eq!(built.lq.unwrap(), LqSpec::fixture_with_jump());
        assert_eq!(built.jumps.total_intensity(), 2.0);
    }

    #[test]
    fn negative_r_names_its_path() {
        let mut v = lq_json();
        v["r"] = serde_json::json!([-1.0]);
        let d: ModelDescriptor = serde_json::from_value(v).unwrap();
        match d.build() {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.r[0]"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matrices_must_be_diagonal() {
        assert_eq!(diagonal("a", &[1.0, 0.0, 0.0, 2.0], 2).unwrap(), vec![1.0, 2.0]);
        assert!(matches!(diagonal("a", &[1.0, 0.5, 0.0, 2.0], 2), Err(Error::Config { path, .. }) if path == "a[1]"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = lq_json();
        v["sigma3"] = serde_json::json!([0.0]);
        assert!(serde_json::from_value::<ModelDescriptor>(v).is_err());
    }

    #[test]
    fn constants_override_and_fault() {
        let mut v = lq_json();
        v["constants"] = serde_json::json!({"lambda_v": 0.0});
        v["fault"] = serde_json::json!({"callback": "drift_dx", "offset": 0.1});
        let p: ModelDescriptor = serde_json::from_value(v).unwrap();
        let p = p.build().unwrap();
        assert_eq!(p.model.constants.lambda_v, 0.0);
        let viol = crate::model::verify_derivative_consistency(&p.model, 5, 1e-5, 1e-6, 1).unwrap();
        assert_eq!(viol.len(), 1);
        assert_eq!(viol[0].callback, "drift_dx");
    }

    #[test]
    fn example_drift_family() {
        let mut v = lq_json();
        let o = v.as_object_mut().unwrap();
        o.remove("a");
        o.remove("abar");
        o.remove("c");
        v["kind"] = serde_json::json!("example_drift");
        v["epsilon"] = serde_json::json!(0.1);
        let d: ModelDescriptor = serde_json::from_value(v).unwrap();
        let p = d.build().unwrap();
        assert_eq!(p.model.name, "example_drift");
        assert!(p.lq.is_none());
    }
}
