//! Host functions invoked synchronously when an automated activity becomes
//! enabled. Functions must be fast and pure: every node that hosts the
//! activity must compute the same outputs from the same inputs.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use super::value::{DataMap, Value};

pub type HostFn = Arc<dyn Fn(&DataMap) -> Result<DataMap, String> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExternalCallError {
    #[error("unregistered function `{0}`")]
    Unregistered(String),
    #[error("function `{name}` failed: {message}")]
    Failed { name: String, message: String },
}

#[derive(Clone, Default)]
pub struct HostRegistry {
    functions: BTreeMap<String, HostFn>,
}

impl fmt::Debug for HostRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.functions.keys()).finish()
    }
}

impl HostRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F>(&mut self, name: &str, f: F)
    where
        F: Fn(&DataMap) -> Result<DataMap, String> + Send + Sync + 'static,
    {
        self.functions.insert(name.to_string(), Arc::new(f));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.functions.contains_key(name)
    }

    pub fn call(&self, name: &str, inputs: &DataMap) -> Result<DataMap, ExternalCallError> {
        let f = self
            .functions
            .get(name)
            .ok_or_else(|| ExternalCallError::Unregistered(name.to_string()))?;
        f(inputs).map_err(|message| ExternalCallError::Failed { name: name.to_string(), message })
    }

    /// Registry with a few deterministic helpers used by examples and tests.
    pub fn with_builtins() -> Self {
        let mut r = Self::new();
        r.register("uppercase", |input| {
            Ok(input
                .iter()
                .map(|(k, v)| {
                    let v = match v {
                        Value::Text(s) => Value::Text(s.to_uppercase()),
                        other => other.clone(),
                    };
                    (k.clone(), v)
                })
                .collect())
        });
        r.register("approve", |_| Ok(DataMap::from([("approved".to_string(), Value::Boolean(true))])));
        r
    }
}
