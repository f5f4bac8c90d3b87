//! Workflow models: plain Petri nets with activity-annotated transitions.
//!
//! Models are authored as TOML documents (the same schema is accepted as JSON
//! by the worklist API):
//!
//! ```toml
//! id = "purchase"
//! places = ["start", "approved", "done"]
//! end_places = ["done"]
//! initial_marking = { start = 1 }
//!
//! [[variables]]
//! name = "amount"
//! type = "integer"
//!
//! [[transitions]]
//! name = "approve"
//! inputs = { start = 1 }
//! outputs = { approved = 1 }
//! node = 1
//! input_variables = ["amount"]
//! output_variables = ["amount"]
//!
//! [[transitions]]
//! name = "ship"
//! inputs = { approved = 1 }
//! outputs = { done = 1 }
//! node = 2
//!
//! [[constraints]]
//! description = "purchase limit"
//! predicate = "amount <= 1000"
//! ```

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::constraint::{compare, DataConstraint, Operand, Predicate};
use super::marking::Marking;
use super::value::{DataMap, ValueType};
use crate::crypto::NodeId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariableDecl {
    pub name: String,
    pub ty: ValueType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionDef {
    pub name: String,
    pub input_places: Marking,
    pub output_places: Marking,
    pub assigned_node: NodeId,
    pub input_variables: Vec<String>,
    pub output_variables: Vec<String>,
    pub external_call: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkflowModel {
    pub model_id: String,
    pub places: BTreeSet<String>,
    pub transitions: Vec<TransitionDef>,
    pub initial_marking: Marking,
    pub variables: Vec<VariableDecl>,
    pub constraints: Vec<DataConstraint>,
    pub end_places: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum ModelError {
    #[error("model id is empty")]
    EmptyId,
    #[error("initial marking is empty")]
    EmptyInitialMarking,
    #[error("{context} references undeclared place `{place}`")]
    UnknownPlace { context: String, place: String },
    #[error("duplicate transition name `{0}`")]
    DuplicateTransition(String),
    #[error("duplicate variable `{0}`")]
    DuplicateVariable(String),
    #[error("transition `{0}` has no input places")]
    NoInputPlaces(String),
    #[error("{context} references undeclared variable `{variable}`")]
    UnknownVariable { context: String, variable: String },
    #[error("constraint `{description}` compares `{variable}` with an incompatible value")]
    IncompatibleLiteral { description: String, variable: String },
    #[error("constraint `{description}`: {message}")]
    BadPredicate { description: String, message: String },
    #[error("model document: {0}")]
    Syntax(String),
}

impl WorkflowModel {
    pub fn transition(&self, name: &str) -> Option<&TransitionDef> {
        self.transitions.iter().find(|t| t.name == name)
    }

    pub fn variable_type(&self, name: &str) -> Option<ValueType> {
        self.variables.iter().find(|v| v.name == name).map(|v| v.ty)
    }

    /// Names of transitions enabled in `marking`, in definition order.
    pub fn enabled_transitions(&self, marking: &Marking) -> Vec<&TransitionDef> {
        self.transitions.iter().filter(|t| marking.contains(&t.input_places)).collect()
    }

    /// Check the structural invariants.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.model_id.trim().is_empty() {
            return Err(ModelError::EmptyId);
        }
        if self.initial_marking.is_empty() {
            return Err(ModelError::EmptyInitialMarking);
        }
        let place_check = |context: &str, m: &Marking| -> Result<(), ModelError> {
            match m.places().find(|p| !self.places.contains(*p)) {
                Some(p) => Err(ModelError::UnknownPlace { context: context.to_string(), place: p.to_string() }),
                None => Ok(()),
            }
        };
        place_check("initial marking", &self.initial_marking)?;
        if let Some(p) = self.end_places.iter().find(|p| !self.places.contains(*p)) {
            return Err(ModelError::UnknownPlace { context: "end places".into(), place: p.clone() });
        }

        let mut vars = BTreeSet::new();
        for v in &self.variables {
            if !vars.insert(v.name.as_str()) {
                return Err(ModelError::DuplicateVariable(v.name.clone()));
            }
        }

        let mut names = BTreeSet::new();
        for t in &self.transitions {
            if !names.insert(t.name.as_str()) {
                return Err(ModelError::DuplicateTransition(t.name.clone()));
            }
            if t.input_places.is_empty() {
                return Err(ModelError::NoInputPlaces(t.name.clone()));
            }
            let ctx = format!("transition `{}`", t.name);
            place_check(&ctx, &t.input_places)?;
            place_check(&ctx, &t.output_places)?;
            for v in t.input_variables.iter().chain(&t.output_variables) {
                if !vars.contains(v.as_str()) {
                    return Err(ModelError::UnknownVariable { context: ctx, variable: v.clone() });
                }
            }
        }

        for c in &self.constraints {
            for atom in &c.predicate.0 {
                let ctx = format!("constraint `{}`", c.description);
                let lhs = self.variable_type(&atom.variable).ok_or_else(|| ModelError::UnknownVariable {
                    context: ctx.clone(),
                    variable: atom.variable.clone(),
                })?;
                let compatible = match &atom.rhs {
                    Operand::Literal(v) => type_sample(lhs).is_some_and(|s| compare(&s, v).is_some()),
                    Operand::Variable(name) => {
                        let rhs = self.variable_type(name).ok_or_else(|| ModelError::UnknownVariable {
                            context: ctx.clone(),
                            variable: name.clone(),
                        })?;
                        compare(&type_sample(lhs).unwrap(), &type_sample(rhs).unwrap()).is_some()
                    }
                };
                if !compatible {
                    return Err(ModelError::IncompatibleLiteral {
                        description: c.description.clone(),
                        variable: atom.variable.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Whether every key is declared and every value conforms to its type.
    pub fn check_data(&self, data: &DataMap) -> Result<(), String> {
        for (k, v) in data {
            match self.variable_type(k) {
                None => return Err(format!("undeclared variable `{k}`")),
                Some(ty) if !v.conforms_to(ty) => {
                    return Err(format!("variable `{k}` expects {ty}, got {}", v.value_type()))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// The first constraint violated by `data`, if any.
    pub fn violated_constraint(&self, data: &DataMap) -> Option<&DataConstraint> {
        self.constraints.iter().find(|c| !c.holds(data))
    }

    pub fn from_toml(text: &str) -> Result<Self, ModelError> {
        let doc: ModelDocument = toml::from_str(text).map_err(|e| ModelError::Syntax(e.to_string()))?;
        doc.into_model()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&ModelDocument::from(self)).expect("model document serializes")
    }
}

fn type_sample(ty: ValueType) -> Option<super::value::Value> {
    use super::value::Value;
    Some(match ty {
        ValueType::Integer => Value::Integer(0),
        ValueType::Real => Value::Real(0.0),
        ValueType::Text => Value::Text(String::new()),
        ValueType::Boolean => Value::Boolean(false),
    })
}

/// Operator-facing model file schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub id: String,
    pub places: Vec<String>,
    #[serde(default)]
    pub end_places: Vec<String>,
    pub initial_marking: BTreeMap<String, u32>,
    #[serde(default)]
    pub variables: Vec<VariableDocument>,
    #[serde(default)]
    pub transitions: Vec<TransitionDocument>,
    #[serde(default)]
    pub constraints: Vec<ConstraintDocument>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VariableDocument {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ValueType,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionDocument {
    pub name: String,
    pub inputs: BTreeMap<String, u32>,
    #[serde(default)]
    pub outputs: BTreeMap<String, u32>,
    pub node: u32,
    #[serde(default)]
    pub input_variables: Vec<String>,
    #[serde(default)]
    pub output_variables: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_call: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDocument {
    #[serde(default)]
    pub description: String,
    pub predicate: String,
}

impl ModelDocument {
    pub fn into_model(self) -> Result<WorkflowModel, ModelError> {
        let constraints = self
            .constraints
            .into_iter()
            .map(|c| {
                let predicate: Predicate = c.predicate.parse().map_err(|e: super::constraint::ParseError| {
                    ModelError::BadPredicate { description: c.description.clone(), message: e.to_string() }
                })?;
                let description = if c.description.is_empty() { c.predicate } else { c.description };
                Ok(DataConstraint { description, predicate })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = WorkflowModel {
            model_id: self.id,
            places: self.places.into_iter().collect(),
            transitions: self
                .transitions
                .into_iter()
                .map(|t| TransitionDef {
                    name: t.name,
                    input_places: Marking::from_pairs(t.inputs),
                    output_places: Marking::from_pairs(t.outputs),
                    assigned_node: NodeId(t.node),
                    input_variables: t.input_variables,
                    output_variables: t.output_variables,
                    external_call: t.external_call,
                })
                .collect(),
            initial_marking: Marking::from_pairs(self.initial_marking),
            variables: self.variables.into_iter().map(|v| VariableDecl { name: v.name, ty: v.ty }).collect(),
            constraints,
            end_places: self.end_places.into_iter().collect(),
        };
        model.validate()?;
        Ok(model)
    }
}

impl From<&WorkflowModel> for ModelDocument {
    fn from(m: &WorkflowModel) -> Self {
        let marking = |m: &Marking| m.iter().map(|(p, n)| (p.to_string(), n)).collect();
        ModelDocument {
            id: m.model_id.clone(),
            places: m.places.iter().cloned().collect(),
            end_places: m.end_places.iter().cloned().collect(),
            initial_marking: marking(&m.initial_marking),
            variables: m
                .variables
                .iter()
                .map(|v| VariableDocument { name: v.name.clone(), ty: v.ty })
                .collect(),
            transitions: m
                .transitions
                .iter()
                .map(|t| TransitionDocument {
                    name: t.name.clone(),
                    inputs: marking(&t.input_places),
                    outputs: marking(&t.output_places),
                    node: t.assigned_node.0,
                    input_variables: t.input_variables.clone(),
                    output_variables: t.output_variables.clone(),
                    external_call: t.external_call.clone(),
                })
                .collect(),
            constraints: m
                .constraints
                .iter()
                .map(|c| ConstraintDocument { description: c.description.clone(), predicate: c.predicate.to_string() })
                .collect(),
        }
    }
}

/// Small builder used by tests, examples and the book.
#[derive(Clone, Debug)]
pub struct ModelBuilder {
    model: WorkflowModel,
}

impl ModelBuilder {
    pub fn new(model_id: &str) -> Self {
        ModelBuilder {
            model: WorkflowModel {
                model_id: model_id.to_string(),
                places: BTreeSet::new(),
                transitions: Vec::new(),
                initial_marking: Marking::new(),
                variables: Vec::new(),
                constraints: Vec::new(),
                end_places: BTreeSet::new(),
            },
        }
    }

    pub fn places(mut self, places: &[&str]) -> Self {
        self.model.places.extend(places.iter().map(|p| p.to_string()));
        self
    }

    pub fn initial(mut self, place: &str, tokens: u32) -> Self {
        self.model.initial_marking.add(place, tokens);
        self
    }

    pub fn end_places(mut self, places: &[&str]) -> Self {
        self.model.end_places.extend(places.iter().map(|p| p.to_string()));
        self
    }

    pub fn variable(mut self, name: &str, ty: ValueType) -> Self {
        self.model.variables.push(VariableDecl { name: name.to_string(), ty });
        self
    }

    /// Add a transition with unit arcs.
    pub fn transition(self, name: &str, inputs: &[&str], outputs: &[&str], node: u32) -> Self {
        self.transition_with(name, inputs, outputs, node, |t| t)
    }

    pub fn transition_with(
        mut self,
        name: &str,
        inputs: &[&str],
        outputs: &[&str],
        node: u32,
        configure: impl FnOnce(TransitionDef) -> TransitionDef,
    ) -> Self {
        let t = TransitionDef {
            name: name.to_string(),
            input_places: Marking::from_pairs(inputs.iter().map(|p| (*p, 1))),
            output_places: Marking::from_pairs(outputs.iter().map(|p| (*p, 1))),
            assigned_node: NodeId(node),
            input_variables: Vec::new(),
            output_variables: Vec::new(),
            external_call: None,
        };
        self.model.transitions.push(configure(t));
        self
    }

    pub fn constraint(mut self, description: &str, predicate: &str) -> Self {
        self.model.constraints.push(DataConstraint {
            description: description.to_string(),
            predicate: predicate.parse().expect("valid predicate"),
        });
        self
    }

    pub fn build(self) -> Result<WorkflowModel, ModelError> {
        self.model.validate()?;
        Ok(self.model)
    }

    /// Return the model without structural checks.
    pub fn build_unchecked(self) -> WorkflowModel {
        self.model
    }
}

/// The three-place sequence net `p0 -[A]-> p1 -[B]-> p2`.
pub fn sequence_net(model_id: &str, node_a: u32, node_b: u32) -> WorkflowModel {
    ModelBuilder::new(model_id)
        .places(&["p0", "p1", "p2"])
        .initial("p0", 1)
        .end_places(&["p2"])
        .transition("A", &["p0"], &["p1"], node_a)
        .transition("B", &["p1"], &["p2"], node_b)
        .build()
        .expect("sequence net is well formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOC: &str = r#"
id = "purchase"
places = ["start", "approved", "done"]
end_places = ["done"]
initial_marking = { start = 1 }

[[variables]]
name = "amount"
type = "integer"

[[transitions]]
name = "approve"
inputs = { start = 1 }
outputs = { approved = 1 }
node = 1
input_variables = ["amount"]
output_variables = ["amount"]

[[transitions]]
name = "ship"
inputs = { approved = 1 }
outputs = { done = 1 }
node = 2
external_call = "notify"

[[constraints]]
description = "purchase limit"
predicate = "amount <= 1000"
"#;

    #[test]
    fn parses_model_document() {
        let m = WorkflowModel::from_toml(DOC).unwrap();
        assert_eq!(m.model_id, "purchase");
        assert_eq!(m.transitions.len(), 2);
        assert_eq!(m.transition("ship").unwrap().external_call.as_deref(), Some("notify"));
        assert_eq!(m.initial_marking, Marking::from_pairs([("start", 1)]));
        let again = WorkflowModel::from_toml(&m.to_toml()).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn undeclared_place_is_malformed() {
        let err = ModelBuilder::new("m")
            .places(&["p0"])
            .initial("p0", 1)
            .transition("A", &["p0"], &["nowhere"], 0)
            .build()
            .unwrap_err();
        assert!(matches!(err, ModelError::UnknownPlace { place, .. } if place == "nowhere"));
    }

    #[test]
    fn structural_violations() {
        let base = || ModelBuilder::new("m").places(&["p0", "p1"]).initial("p0", 1);
        assert_eq!(
            ModelBuilder::new("m").places(&["p0"]).build().unwrap_err(),
            ModelError::EmptyInitialMarking
        );
        assert_eq!(
            base().transition("A", &["p0"], &["p1"], 0).transition("A", &["p1"], &[], 0).build().unwrap_err(),
            ModelError::DuplicateTransition("A".into())
        );
        assert_eq!(
            base().transition("A", &[], &["p1"], 0).build().unwrap_err(),
            ModelError::NoInputPlaces("A".into())
        );
        assert!(matches!(
            base()
                .transition_with("A", &["p0"], &["p1"], 0, |mut t| {
                    t.output_variables.push("ghost".into());
                    t
                })
                .build(),
            Err(ModelError::UnknownVariable { .. })
        ));
        assert!(matches!(
            base().variable("ok", ValueType::Boolean).constraint("c", "ok < 3").build(),
            Err(ModelError::IncompatibleLiteral { .. })
        ));
        assert!(matches!(
            WorkflowModel::from_toml("id = 3"),
            Err(ModelError::Syntax(_))
        ));
    }

    #[test]
    fn enabling_rule() {
        let net = sequence_net("seq", 0, 1);
        let names = |m: &Marking| net.enabled_transitions(m).iter().map(|t| t.name.clone()).collect::<Vec<_>>();
        assert_eq!(names(&Marking::from_pairs([("p0", 1)])), vec!["A"]);
        assert!(names(&Marking::new()).is_empty());

        let and_split = ModelBuilder::new("and")
            .places(&["p0", "p1", "p2", "p3", "p4"])
            .initial("p0", 1)
            .transition("split", &["p0"], &["p1", "p2"], 0)
            .transition("left", &["p1"], &["p3"], 0)
            .transition("right", &["p2"], &["p4"], 0)
            .build()
            .unwrap();
        let enabled: Vec<_> = and_split
            .enabled_transitions(&Marking::from_pairs([("p1", 1), ("p2", 1)]))
            .iter()
            .map(|t| t.name.as_str())
            .collect();
        assert_eq!(enabled, vec!["left", "right"]);
    }
}
