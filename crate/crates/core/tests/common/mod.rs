//! Helpers shared by the integration tests: an independent brute-force
//! validation oracle, a random net generator and cluster workloads.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::Arc;

use ledgerflow::block::Block;
use ledgerflow::cluster::Cluster;
use ledgerflow::crypto::{Digest, KeyDirectory, KeyPair, NodeId};
use ledgerflow::workflow::constraint::{CmpOp, Operand};
use ledgerflow::workflow::{
    DataMap, Engine, HostRegistry, InstanceState, ModelBuilder, Transaction, TxBody, Value, ValueType, WorkflowModel,
};
use rand::seq::SliceRandom;
use rand::Rng;

pub type Tokens = BTreeMap<String, u32>;

fn tokens(m: &ledgerflow::workflow::Marking) -> Tokens {
    m.iter().filter(|(_, n)| *n > 0).map(|(p, n)| (p.to_string(), n)).collect()
}

/// Every marking reachable by firing exactly one transition, with the
/// transition's index. Plain per-place arithmetic, no library helpers.
pub fn single_firing_successors(model: &WorkflowModel, from: &Tokens) -> Vec<(usize, Tokens)> {
    let mut out = Vec::new();
    'next: for (i, t) in model.transitions.iter().enumerate() {
        let mut m = from.clone();
        for (p, n) in t.input_places.iter() {
            let have = m.get(p).copied().unwrap_or(0);
            if have < n {
                continue 'next;
            }
            m.insert(p.to_string(), have - n);
        }
        for (p, n) in t.output_places.iter() {
            *m.entry(p.to_string()).or_insert(0) += n;
        }
        m.retain(|_, n| *n > 0);
        out.push((i, m));
    }
    out
}

fn num(v: &Value) -> Option<f64> {
    match v {
        Value::Integer(i) => Some(*i as f64),
        Value::Real(r) => Some(*r),
        _ => None,
    }
}

fn cmp_values(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Text(x), Value::Text(y)) => Some(x.cmp(y)),
        (Value::Boolean(x), Value::Boolean(y)) => Some(x.cmp(y)),
        (Value::Integer(x), Value::Integer(y)) => Some(x.cmp(y)),
        _ => num(a)?.partial_cmp(&num(b)?),
    }
}

/// Evaluate every constraint of `model` on `data`. A constraint naming an
/// unset variable holds vacuously.
pub fn constraints_hold(model: &WorkflowModel, data: &DataMap) -> bool {
    model.constraints.iter().all(|c| {
        let atoms = &c.predicate.0;
        let referenced = atoms.iter().all(|a| {
            data.contains_key(&a.variable)
                && match &a.rhs {
                    Operand::Variable(v) => data.contains_key(v),
                    Operand::Literal(_) => true,
                }
        });
        !referenced
            || atoms.iter().all(|a| {
                let rhs = match &a.rhs {
                    Operand::Literal(v) => v,
                    Operand::Variable(v) => &data[v],
                };
                match cmp_values(&data[&a.variable], rhs) {
                    None => false,
                    Some(o) => match a.op {
                        CmpOp::Eq => o.is_eq(),
                        CmpOp::Ne => o.is_ne(),
                        CmpOp::Lt => o.is_lt(),
                        CmpOp::Le => o.is_le(),
                        CmpOp::Gt => o.is_gt(),
                        CmpOp::Ge => o.is_ge(),
                    },
                }
            })
    })
}

fn well_typed(model: &WorkflowModel, data: &DataMap) -> bool {
    data.iter().all(|(k, v)| {
        model.variables.iter().any(|d| {
            d.name == *k
                && matches!(
                    (v, d.ty),
                    (Value::Integer(_), ValueType::Integer | ValueType::Real)
                        | (Value::Real(_), ValueType::Real)
                        | (Value::Text(_), ValueType::Text)
                        | (Value::Boolean(_), ValueType::Boolean)
                )
        })
    })
}

/// Whether `to` is an acceptable next state of a case currently at `from`
/// (`None` for a launch).
pub fn oracle_accepts(model: &WorkflowModel, from: Option<(&Tokens, &DataMap)>, to: (&Tokens, &DataMap)) -> bool {
    let (to_marking, to_data) = to;
    if !well_typed(model, to_data) || !constraints_hold(model, to_data) {
        return false;
    }
    match from {
        None => *to_marking == tokens(&model.initial_marking),
        Some((marking, data)) => {
            let mut keys: Vec<&String> = data.keys().chain(to_data.keys()).collect();
            keys.sort();
            keys.dedup();
            let changed: Vec<&String> = keys.into_iter().filter(|k| data.get(*k) != to_data.get(*k)).collect();
            single_firing_successors(model, marking).into_iter().any(|(i, m)| {
                m == *to_marking && changed.iter().all(|k| model.transitions[i].output_variables.contains(k))
            })
        }
    }
}

pub fn marking_of(t: &Tokens) -> ledgerflow::workflow::Marking {
    ledgerflow::workflow::Marking::from_pairs(t.iter().map(|(p, n)| (p.as_str(), *n)))
}

const VARS: [&str; 3] = ["x", "y", "z"];

/// A random plain net with at most 8 places and 8 transitions, integer
/// variables and a few constraints.
pub fn random_net(rng: &mut impl Rng, id: &str) -> WorkflowModel {
    let np = rng.gen_range(2..=8);
    let nt = rng.gen_range(1..=8);
    let places: Vec<String> = (0..np).map(|i| format!("p{i}")).collect();
    let refs: Vec<&str> = places.iter().map(String::as_str).collect();
    let mut b = ModelBuilder::new(id).places(&refs).initial("p0", rng.gen_range(1..=2)).end_places(&[refs[np - 1]]);
    if rng.gen_bool(0.3) {
        b = b.initial(refs[rng.gen_range(1..np)], 1);
    }
    for v in VARS {
        b = b.variable(v, ValueType::Integer);
    }
    for t in 0..nt {
        let (ni, no) = (rng.gen_range(1..=2), rng.gen_range(0..=2));
        let ins: Vec<&str> = refs.choose_multiple(rng, ni).copied().collect();
        let outs: Vec<&str> = refs.choose_multiple(rng, no).copied().collect();
        let out_vars: Vec<String> = VARS.iter().filter(|_| rng.gen_bool(0.4)).map(|v| v.to_string()).collect();
        let weight = rng.gen_range(1..=2);
        b = b.transition_with(&format!("t{t}"), &ins, &outs, 0, |mut d| {
            if weight > 1 {
                let p = ins[0];
                d.input_places = ledgerflow::workflow::Marking::from_pairs(
                    d.input_places.iter().map(|(q, n)| (q.to_string(), if q == p { n * weight } else { n })),
                );
            }
            d.output_variables = out_vars;
            d
        });
    }
    let ops = ["<", "<=", ">", ">=", "=", "!="];
    for c in 0..rng.gen_range(0..=2) {
        let lhs = VARS.choose(rng).unwrap();
        let op = ops.choose(rng).unwrap();
        let pred = if rng.gen_bool(0.3) {
            format!("{lhs} {op} {}", VARS.choose(rng).unwrap())
        } else {
            format!("{lhs} {op} {}", rng.gen_range(0..6))
        };
        b = b.constraint(&format!("c{c}"), &pred);
    }
    b.build().expect("generated net is well formed")
}

pub fn random_data(rng: &mut impl Rng) -> DataMap {
    let mut data = DataMap::new();
    for v in VARS {
        if rng.gen_bool(0.7) {
            data.insert(v.to_string(), Value::Integer(rng.gen_range(0..6)));
        }
    }
    data
}

/// A proposal for the next state of a case at `from`: usually an honest
/// single firing with plausible data, otherwise a perturbation.
pub fn random_proposal(rng: &mut impl Rng, model: &WorkflowModel, from: &Tokens, data: &DataMap) -> (Tokens, DataMap) {
    let succ = single_firing_successors(model, from);
    let mut marking = match succ.choose(rng) {
        Some((_, m)) if rng.gen_bool(0.7) => m.clone(),
        _ => from.clone(),
    };
    if rng.gen_bool(0.25) {
        let p = format!("p{}", rng.gen_range(0..model.places.len()));
        let n = marking.entry(p).or_insert(0);
        *n = if *n > 0 && rng.gen_bool(0.5) { *n - 1 } else { *n + 1 };
        marking.retain(|_, n| *n > 0);
    }
    let mut data = data.clone();
    for _ in 0..rng.gen_range(0..=2) {
        let v = VARS.choose(rng).unwrap().to_string();
        if rng.gen_bool(0.1) {
            data.remove(&v);
        } else {
            data.insert(v, Value::Integer(rng.gen_range(0..6)));
        }
    }
    if rng.gen_bool(0.05) {
        data.insert("x".into(), Value::Text("oops".into()));
    }
    (marking, data)
}

/// A reachable state obtained by a short random walk from the initial one.
pub fn random_reachable(rng: &mut impl Rng, model: &WorkflowModel) -> (Tokens, DataMap) {
    let mut m = tokens(&model.initial_marking);
    for _ in 0..rng.gen_range(0..4) {
        match single_firing_successors(model, &m).choose(rng) {
            Some((_, next)) => m = next.clone(),
            None => break,
        }
    }
    (m, random_data(rng))
}

pub fn keys() -> (KeyPair, Arc<KeyDirectory>) {
    (KeyPair::for_test(NodeId(0)), Arc::new(KeyDirectory::for_test(4)))
}

pub fn instance_tx(case: Digest, model: &str, marking: &Tokens, data: &DataMap, keys: &KeyPair) -> Transaction {
    Transaction::sign(
        TxBody::InstanceState(InstanceState {
            case_id: case,
            model_id: model.to_string(),
            marking: marking_of(marking),
            data: data.clone(),
        }),
        NodeId(0),
        keys,
    )
}

/// An engine holding `model` and, if given, one case at `base`.
pub fn engine_with(model: &WorkflowModel, base: Option<(Digest, &Tokens, &DataMap)>) -> Engine {
    let (kp, dir) = keys();
    let mut engine = Engine::new(NodeId(0), kp.clone(), dir, HostRegistry::with_builtins());
    let mut txs = vec![Transaction::sign(TxBody::ModelUpdate(model.clone()), NodeId(0), &kp)];
    if let Some((case, m, d)) = base {
        txs.push(instance_tx(case, &model.model_id, m, d, &kp));
    }
    engine.apply_block(&Block::build(1, Block::genesis().hash, txs, 0));
    engine
}

/// Fire-and-forget submissions of fresh model installs, one per call.
pub fn install_fresh(c: &mut Cluster, node: NodeId, tag: &str) -> bool {
    let model = ledgerflow::workflow::sequence_net(tag, 1, 2);
    c.with_node(node, |n, now| Ok(((), n.install_model(model, now)?))).is_ok()
}
