//! Linear component-wise power model.
//!
//! The default model is a synthetic stand-in with the structure of a
//! profiled instruction-level model: per-class intercepts, operand and
//! result weights, pipeline-latch transitions and memory-bus terms. Its
//! coefficients are not fitted to silicon.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::isa::InstrClass;
use super::machine::{hd, hw, Step};
use crate::error::{Error, Result};

/// Which barrier removes a transition term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    Pipeline,
    MemoryBus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extractor {
    Intercept(InstrClass),
    HwOp1,
    HwOp2,
    HwResult,
    /// Previous value of the same latch vs the new one.
    HdOp1,
    HdOp2,
    HdResult,
    HdOp1PrevOp2,
    HdOp2PrevOp1,
    HdPrevResultOp1,
    HdPrevResultOp2,
    HdOp1Op2,
    HdResultOp1,
    HdResultOp2,
    HwOp1AndOp2,
    HwBus,
    HdBus,
    BitOp1(u8),
    BitOp2(u8),
    BitResult(u8),
    HwAddress,
    HdAddress,
}

impl Extractor {
    fn parse(id: &str, params: &BTreeMap<String, Value>) -> Result<Self> {
        let bit = || -> Result<u8> {
            params
                .get("bit")
                .and_then(Value::as_u64)
                .filter(|&b| b < 32)
                .map(|b| b as u8)
                .ok_or_else(|| Error::Format(format!("extractor '{id}' needs a bit parameter in 0..32")))
        };
        Ok(match id {
            "intercept" => {
                let class = params
                    .get("class")
                    .cloned()
                    .ok_or_else(|| Error::Format("intercept needs a class parameter".into()))?;
                Extractor::Intercept(serde_json::from_value(class)?)
            }
            "hw_op1" => Extractor::HwOp1,
            "hw_op2" => Extractor::HwOp2,
            "hw_result" => Extractor::HwResult,
            "hd_op1" => Extractor::HdOp1,
            "hd_op2" => Extractor::HdOp2,
            "hd_result" => Extractor::HdResult,
            "hd_op1_prev_op2" => Extractor::HdOp1PrevOp2,
            "hd_op2_prev_op1" => Extractor::HdOp2PrevOp1,
            "hd_prev_result_op1" => Extractor::HdPrevResultOp1,
            "hd_prev_result_op2" => Extractor::HdPrevResultOp2,
            "hd_op1_op2" => Extractor::HdOp1Op2,
            "hd_result_op1" => Extractor::HdResultOp1,
            "hd_result_op2" => Extractor::HdResultOp2,
            "hw_op1_and_op2" => Extractor::HwOp1AndOp2,
            "hw_bus" => Extractor::HwBus,
            "hd_bus" => Extractor::HdBus,
            "bit_op1" => Extractor::BitOp1(bit()?),
            "bit_op2" => Extractor::BitOp2(bit()?),
            "bit_result" => Extractor::BitResult(bit()?),
            "hw_address" => Extractor::HwAddress,
            "hd_address" => Extractor::HdAddress,
            other => return Err(Error::Format(format!("unknown extractor '{other}'"))),
        })
    }

    fn id(&self) -> (&'static str, BTreeMap<String, Value>) {
        let mut params = BTreeMap::new();
        let id = match *self {
            Extractor::Intercept(c) => {
                params.insert("class".into(), serde_json::to_value(c).unwrap());
                "intercept"
            }
            Extractor::HwOp1 => "hw_op1",
            Extractor::HwOp2 => "hw_op2",
            Extractor::HwResult => "hw_result",
            Extractor::HdOp1 => "hd_op1",
            Extractor::HdOp2 => "hd_op2",
            Extractor::HdResult => "hd_result",
            Extractor::HdOp1PrevOp2 => "hd_op1_prev_op2",
            Extractor::HdOp2PrevOp1 => "hd_op2_prev_op1",
            Extractor::HdPrevResultOp1 => "hd_prev_result_op1",
            Extractor::HdPrevResultOp2 => "hd_prev_result_op2",
            Extractor::HdOp1Op2 => "hd_op1_op2",
            Extractor::HdResultOp1 => "hd_result_op1",
            Extractor::HdResultOp2 => "hd_result_op2",
            Extractor::HwOp1AndOp2 => "hw_op1_and_op2",
            Extractor::HwBus => "hw_bus",
            Extractor::HdBus => "hd_bus",
            Extractor::BitOp1(b) | Extractor::BitOp2(b) | Extractor::BitResult(b) => {
                params.insert("bit".into(), Value::from(b));
                match self {
                    Extractor::BitOp1(_) => "bit_op1",
                    Extractor::BitOp2(_) => "bit_op2",
                    _ => "bit_result",
                }
            }
            Extractor::HwAddress => "hw_address",
            Extractor::HdAddress => "hd_address",
        };
        (id, params)
    }

    /// Transition terms that a barrier instruction can break.
    pub fn transition(&self) -> Option<Transition> {
        match self {
            Extractor::HdOp1
            | Extractor::HdOp2
            | Extractor::HdResult
            | Extractor::HdOp1PrevOp2
            | Extractor::HdOp2PrevOp1
            | Extractor::HdPrevResultOp1
            | Extractor::HdPrevResultOp2 => Some(Transition::Pipeline),
            Extractor::HdBus => Some(Transition::MemoryBus),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, s: &Step) -> f64 {
        let pair = |a: Option<u32>, b: Option<u32>, f: fn(u32, u32) -> u32| match (a, b) {
            (Some(a), Some(b)) => f(a, b) as f64,
            _ => 0.0,
        };
        let one = |a: Option<u32>, f: &dyn Fn(u32) -> u32| a.map_or(0.0, |v| f(v) as f64);
        let b = &s.before;
        match *self {
            Extractor::Intercept(c) => f64::from(u8::from(s.class == c)),
            Extractor::HwOp1 => one(s.op1, &hw),
            Extractor::HwOp2 => one(s.op2, &hw),
            Extractor::HwResult => one(s.result, &hw),
            Extractor::HdOp1 => one(s.op1, &|v| hd(b.op1, v)),
            Extractor::HdOp2 => one(s.op2, &|v| hd(b.op2, v)),
            Extractor::HdResult => one(s.result, &|v| hd(b.result, v)),
            Extractor::HdOp1PrevOp2 => one(s.op1, &|v| hd(b.op2, v)),
            Extractor::HdOp2PrevOp1 => one(s.op2, &|v| hd(b.op1, v)),
            Extractor::HdPrevResultOp1 => one(s.op1, &|v| hd(b.result, v)),
            Extractor::HdPrevResultOp2 => one(s.op2, &|v| hd(b.result, v)),
            Extractor::HdOp1Op2 => pair(s.op1, s.op2, hd),
            Extractor::HdResultOp1 => pair(s.result, s.op1, hd),
            Extractor::HdResultOp2 => pair(s.result, s.op2, hd),
            Extractor::HwOp1AndOp2 => pair(s.op1, s.op2, |a, b| hw(a & b)),
            Extractor::HwBus => s.bus.as_slice().iter().map(|&v| hw(v) as f64).sum(),
            Extractor::HdBus => {
                let mut prev = b.bus;
                let mut total = 0u32;
                for &v in s.bus.as_slice() {
                    total += hd(prev, v);
                    prev = v;
                }
                total as f64
            }
            Extractor::BitOp1(k) => one(s.op1, &|v| (v >> k) & 1),
            Extractor::BitOp2(k) => one(s.op2, &|v| (v >> k) & 1),
            Extractor::BitResult(k) => one(s.result, &|v| (v >> k) & 1),
            Extractor::HwAddress => one(s.address, &hw),
            Extractor::HdAddress => one(s.address, &|v| hd(b.address, v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDef {
    pub name: String,
    pub extractor: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    description: Option<String>,
    components: Vec<ComponentDef>,
    coefficients: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile", into = "ModelFile")]
pub struct LeakageModel {
    pub description: Option<String>,
    pub components: Vec<ComponentDef>,
    pub coefficients: Vec<f64>,
    extractors: Vec<Extractor>,
}

impl TryFrom<ModelFile> for LeakageModel {
    type Error = Error;
    fn try_from(f: ModelFile) -> Result<Self> {
        if f.components.len() != f.coefficients.len() {
            return Err(Error::Format(format!(
                "{} components but {} coefficients",
                f.components.len(),
                f.coefficients.len()
            )));
        }
        if let Some(c) = f.coefficients.iter().find(|c| !c.is_finite()) {
            return Err(Error::NonFinite(*c));
        }
        let extractors = f
            .components
            .iter()
            .map(|c| Extractor::parse(&c.extractor, &c.params))
            .collect::<Result<_>>()?;
        Ok(Self {
            description: f.description,
            components: f.components,
            coefficients: f.coefficients,
            extractors,
        })
    }
}

impl From<LeakageModel> for ModelFile {
    fn from(m: LeakageModel) -> Self {
        ModelFile {
            description: m.description,
            components: m.components,
            coefficients: m.coefficients,
        }
    }
}

/// Weight unit of the data-dependent default terms.
const UNIT: f64 = 1.0e-4;

impl Default for LeakageModel {
    fn default() -> Self {
        use Extractor::*;
        let class = |c| Intercept(c);
        let spec: [(&str, Extractor, f64); 28] = [
            ("intercept_arith", class(InstrClass::Arith), 1.00),
            ("intercept_logic", class(InstrClass::Logic), 0.98),
            ("intercept_shift", class(InstrClass::Shift), 1.02),
            ("intercept_move", class(InstrClass::Move), 0.95),
            ("intercept_load", class(InstrClass::Load), 1.30),
            ("intercept_store", class(InstrClass::Store), 1.25),
            ("intercept_stack", class(InstrClass::Stack), 1.20),
            ("hw_op1", HwOp1, 0.8 * UNIT),
            ("hw_op2", HwOp2, 0.8 * UNIT),
            ("hw_result", HwResult, 0.1 * UNIT),
            ("hd_op1", HdOp1, 0.6 * UNIT),
            ("hd_op2", HdOp2, 0.6 * UNIT),
            ("hd_result", HdResult, 0.1 * UNIT),
            ("hd_op1_prev_op2", HdOp1PrevOp2, 0.3 * UNIT),
            ("hd_op2_prev_op1", HdOp2PrevOp1, 0.3 * UNIT),
            ("hd_prev_result_op1", HdPrevResultOp1, 0.3 * UNIT),
            ("hd_prev_result_op2", HdPrevResultOp2, 0.3 * UNIT),
            ("hd_op1_op2", HdOp1Op2, 0.4 * UNIT),
            ("hd_result_op1", HdResultOp1, 0.4 * UNIT),
            ("hd_result_op2", HdResultOp2, 0.4 * UNIT),
            ("hw_op1_and_op2", HwOp1AndOp2, 0.3 * UNIT),
            ("hw_bus", HwBus, 0.7 * UNIT),
            ("hd_bus", HdBus, 0.8 * UNIT),
            ("bit0_op1", BitOp1(0), 0.5 * UNIT),
            ("bit31_op1", BitOp1(31), 0.5 * UNIT),
            ("bit0_op2", BitOp2(0), 0.5 * UNIT),
            ("bit0_result", BitResult(0), 0.1 * UNIT),
            ("bit31_result", BitResult(31), 0.1 * UNIT),
        ];
        let mut components = Vec::with_capacity(spec.len());
        let mut coefficients = Vec::with_capacity(spec.len());
        let mut extractors = Vec::with_capacity(spec.len());
        for (name, ex, coeff) in spec {
            let (id, params) = ex.id();
            components.push(ComponentDef { name: name.into(), extractor: id.into(), params });
            coefficients.push(coeff);
            extractors.push(ex);
        }
        Self {
            description: Some("synthetic default model (not fitted to a device)".into()),
            components,
            coefficients,
            extractors,
        }
    }
}

impl LeakageModel {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.components.iter().map(|c| c.name.clone()).collect()
    }

    pub fn extractors(&self) -> &[Extractor] {
        &self.extractors
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.components.iter().position(|c| c.name == name)
    }

    pub fn push_component(&mut self, name: &str, extractor: &str, params: BTreeMap<String, Value>, coefficient: f64) -> Result<()> {
        let ex = Extractor::parse(extractor, &params)?;
        self.components.push(ComponentDef { name: name.into(), extractor: extractor.into(), params });
        self.coefficients.push(coefficient);
        self.extractors.push(ex);
        Ok(())
    }

    /// Component values of one step.
    #[inline]
    pub fn evaluate(&self, step: &Step, out: &mut [f32]) {
        for (o, ex) in out.iter_mut().zip(&self.extractors) {
            *o = ex.eval(step) as f32;
        }
    }

    #[inline]
    pub fn power(&self, components: &[f32]) -> f64 {
        components
            .iter()
            .zip(&self.coefficients)
            .map(|(&v, c)| v as f64 * c)
            .sum()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut m = self.clone();
        m.coefficients.iter_mut().for_each(|c| *c *= k);
        m
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_has_28_components() {
        let m = LeakageModel::default();
        assert_eq!(m.n_components(), 28);
        assert_eq!(m.coefficients.len(), 28);
        let mut names = m.names();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 28);
    }

    #[test]
    fn json_round_trip() {
        let m = LeakageModel::default();
        let text = serde_json::to_string(&m).unwrap();
        let back: LeakageModel = serde_json::from_str(&text).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn bad_model_files() {
        let cases = [
            r#"{"components":[{"name":"a","extractor":"hw_op1"}],"coefficients":[]}"#,
            r#"{"components":[{"name":"a","extractor":"nope"}],"coefficients":[1.0]}"#,
            r#"{"components":[{"name":"a","extractor":"bit_op1","params":{"bit":40}}],"coefficients":[1.0]}"#,
            r#"{"components":[{"name":"a","extractor":"intercept","params":{"class":"jump"}}],"coefficients":[1.0]}"#,
        ];
        for c in cases {
            assert!(serde_json::from_str::<LeakageModel>(c).is_err(), "{c}");
        }
    }

    #[test]
    fn transitions_map_to_barriers() {
        let m = LeakageModel::default();
        let kinds: Vec<_> = m.extractors().iter().filter_map(Extractor::transition).collect();
        assert_eq!(kinds.iter().filter(|k| **k == Transition::MemoryBus).count(), 1);
        assert_eq!(kinds.iter().filter(|k| **k == Transition::Pipeline).count(), 7);
    }
}
