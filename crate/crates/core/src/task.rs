//! Offloadable tasks.
//!
//! A [`TaskBundle`] is the unit a client registers for offloading. The
//! runtime moves its state, input and output across the wire as opaque bytes
//! through the type-erased [`ErasedTask`] view.

use std::fmt;
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskKey {
    pub id: String,
    pub version: u32,
}

impl TaskKey {
    pub fn new(id: impl Into<String>, version: u32) -> Self {
        Self {
            id: id.into(),
            version,
        }
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.id, self.version)
    }
}

/// An exception raised by a task body. Remote exceptions are carried as
/// `(kind, message)` and rebuilt identically on the client.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaskError {
    #[error("out of memory: {0}")]
    OutOfMemory(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("{kind}: {message}")]
    Failed { kind: String, message: String },
}

impl TaskError {
    pub const OUT_OF_MEMORY: &'static str = "OutOfMemory";

    pub fn failed(kind: impl Into<String>, message: impl Into<String>) -> Self {
        TaskError::Failed {
            kind: kind.into(),
            message: message.into(),
        }
    }

    pub fn to_wire(&self) -> (String, String) {
        match self {
            TaskError::OutOfMemory(m) => (Self::OUT_OF_MEMORY.into(), m.clone()),
            TaskError::InvalidInput(m) => ("InvalidInput".into(), m.clone()),
            TaskError::Io(m) => ("Io".into(), m.clone()),
            TaskError::Failed { kind, message } => (kind.clone(), message.clone()),
        }
    }

    pub fn from_wire(kind: &str, message: &str) -> Self {
        match kind {
            Self::OUT_OF_MEMORY => TaskError::OutOfMemory(message.into()),
            "InvalidInput" => TaskError::InvalidInput(message.into()),
            "Io" => TaskError::Io(message.into()),
            _ => TaskError::failed(kind, message),
        }
    }

    pub fn is_out_of_memory(&self) -> bool {
        matches!(self, TaskError::OutOfMemory(_))
    }
}

/// A registered, possibly splittable, unit of offloadable computation.
pub trait TaskBundle: Send + Sync + 'static {
    /// Object state copied back to the caller after a remote run.
    type State: Serialize + DeserializeOwned + Default + Clone + Send + Sync;
    type Input: Serialize + DeserializeOwned + Clone + Send + Sync;
    type Output: Serialize + DeserializeOwned + Clone + PartialEq + fmt::Debug + Send + Sync;

    fn id(&self) -> &str;

    fn version(&self) -> u32 {
        1
    }

    fn run(&self, state: &mut Self::State, input: &Self::Input) -> Result<Self::Output, TaskError>;

    /// Task-reported work counter; drives the simulated compute time.
    fn work_units(&self, input: &Self::Input) -> u64;

    /// Cost of one work unit on a reference clone (1 CPU, speed factor 1), ms.
    fn unit_cost_ms(&self) -> f64;

    /// Nonnegative magnitude used to bucket history across inputs.
    fn input_size_proxy(&self, input: &Self::Input) -> f64;

    fn peak_memory_mb(&self, _input: &Self::Input) -> f64 {
        0.0
    }

    fn splittable(&self) -> bool {
        false
    }

    /// Partitions `input` into at most `parts` near-equal pieces.
    fn split(&self, input: &Self::Input, _parts: usize) -> Vec<Self::Input> {
        vec![input.clone()]
    }

    fn merge(&self, partials: Vec<Self::Output>) -> Result<Self::Output, TaskError> {
        let mut it = partials.into_iter();
        match (it.next(), it.next()) {
            (Some(only), None) => Ok(only),
            _ => Err(TaskError::failed(
                "MergeUnsupported",
                format!("{} cannot merge partial results", self.id()),
            )),
        }
    }
}

/// What a run will cost, known before running it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskDemand {
    pub work_units: u64,
    pub peak_memory_mb: f64,
    pub size_proxy: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutput {
    pub result: Vec<u8>,
    pub state: Vec<u8>,
}

/// Byte-level view of a task shared by client and server.
pub trait ErasedTask: Send + Sync {
    fn key(&self) -> TaskKey;
    fn fingerprint(&self) -> [u8; 32];
    fn splittable(&self) -> bool;
    fn unit_cost_ms(&self) -> f64;
    fn demand(&self, args: &[u8]) -> Result<TaskDemand, TaskError>;
    fn run(&self, state: &[u8], args: &[u8]) -> Result<RunOutput, TaskError>;
    fn split(&self, args: &[u8], parts: usize) -> Result<Vec<Vec<u8>>, TaskError>;
    fn merge(&self, partials: Vec<Vec<u8>>) -> Result<Vec<u8>, TaskError>;
}

pub fn encode_value<T: Serialize>(value: &T) -> Vec<u8> {
    bincode::serialize(value).expect("in-memory serialization cannot fail")
}

pub fn decode_value<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, TaskError> {
    bincode::deserialize(bytes).map_err(|e| TaskError::InvalidInput(e.to_string()))
}

/// Identity hash of a bundle: id and version, as shipped in a transfer.
pub fn bundle_fingerprint(key: &TaskKey) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"offload-bundle\0");
    h.update(key.id.as_bytes());
    h.update([0]);
    h.update(key.version.to_be_bytes());
    h.finalize().into()
}

struct Erased<T>(T);

pub fn erase<T: TaskBundle>(task: T) -> Arc<dyn ErasedTask> {
    Arc::new(Erased(task))
}

impl<T: TaskBundle> ErasedTask for Erased<T> {
    fn key(&self) -> TaskKey {
        TaskKey::new(self.0.id(), self.0.version())
    }

    fn fingerprint(&self) -> [u8; 32] {
        bundle_fingerprint(&self.key())
    }

    fn splittable(&self) -> bool {
        self.0.splittable()
    }

    fn unit_cost_ms(&self) -> f64 {
        self.0.unit_cost_ms()
    }

    fn demand(&self, args: &[u8]) -> Result<TaskDemand, TaskError> {
        let input: T::Input = decode_value(args)?;
        Ok(TaskDemand {
            work_units: self.0.work_units(&input),
            peak_memory_mb: self.0.peak_memory_mb(&input),
            size_proxy: self.0.input_size_proxy(&input),
        })
    }

    fn run(&self, state: &[u8], args: &[u8]) -> Result<RunOutput, TaskError> {
        let mut st: T::State = if state.is_empty() {
            T::State::default()
        } else {
            decode_value(state)?
        };
        let input: T::Input = decode_value(args)?;
        let out = self.0.run(&mut st, &input)?;
        Ok(RunOutput {
            result: encode_value(&out),
            state: encode_value(&st),
        })
    }

    fn split(&self, args: &[u8], parts: usize) -> Result<Vec<Vec<u8>>, TaskError> {
        let input: T::Input = decode_value(args)?;
        if !self.0.splittable() || parts <= 1 {
            return Ok(vec![args.to_vec()]);
        }
        Ok(self.0.split(&input, parts).iter().map(encode_value).collect())
    }

    fn merge(&self, partials: Vec<Vec<u8>>) -> Result<Vec<u8>, TaskError> {
        let typed = partials
            .iter()
            .map(|p| decode_value::<T::Output>(p))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(encode_value(&self.0.merge(typed)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip_preserves_errors() {
        let cases = [
            TaskError::OutOfMemory("120 MB > 100 MB".into()),
            TaskError::InvalidInput("n".into()),
            TaskError::Io("gone".into()),
            TaskError::failed("ArithmeticException", "/ by zero"),
        ];
        for e in cases {
            let (k, m) = e.to_wire();
            assert_eq!(TaskError::from_wire(&k, &m), e);
        }
    }

    #[test]
    fn fingerprint_depends_on_version() {
        assert_ne!(
            bundle_fingerprint(&TaskKey::new("fib", 1)),
            bundle_fingerprint(&TaskKey::new("fib", 2))
        );
    }
}
