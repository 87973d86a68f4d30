use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("distance gradient undefined for coincident points")]
    CoincidentPoints,
    #[error("entailment cone undefined: apex norm {norm} is inside the inner radius {min}")]
    ConeUndefined { norm: f64, min: f64 },
    #[error("cannot normalize a zero vector (prototype {0})")]
    ZeroVector(usize),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("unknown node kind `{kind}` on line {line}")]
    UnknownKind { line: usize, kind: String },
    #[error("unknown node id `{0}`")]
    UnknownNode(String),
    #[error("hierarchy has no root")]
    NoRoot,
    #[error("hierarchy has multiple roots: {0:?}")]
    MultipleRoots(Vec<String>),
    #[error("cycle detected through node `{0}`")]
    Cycle(String),
    #[error("instance node `{0}` has children")]
    InstanceWithChildren(String),
    #[error("node `{node}` of kind {kind} has parent `{parent}` of kind {parent_kind}, expected {expected}")]
    KindMismatch {
        node: String,
        kind: String,
        parent: String,
        parent_kind: String,
        expected: String,
    },
    #[error("node `{node}` has no {what}")]
    MissingAncestor { node: String, what: &'static str },

    #[error("distillation requested but no snapshot exists (task {0})")]
    NoSnapshot(usize),
    #[error("label {label} out of range for {count} prototypes")]
    LabelOutOfRange { label: usize, count: usize },
    #[error("task contains no training samples")]
    EmptyTask,
    #[error("instance `{0}` was already seen in an earlier task")]
    LabelCollision(String),
    #[error("memory budget {budget} is smaller than the {seen} seen instances")]
    QuotaZero { budget: usize, seen: usize },
    #[error("non-finite loss during {0}")]
    NonFiniteLoss(String),

    #[error("metric computed over an empty record set")]
    EmptyRecords,
    #[error("forgetting needs at least two tasks, got {0}")]
    TooFewTasks(usize),
    #[error("cannot split {instances} instances into {tasks} tasks")]
    TooManyTasks { tasks: usize, instances: usize },

    #[error("{what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
