use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("gradient requested of a non-scalar output with shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("differentiation target #{0} is not a differentiable variable on this tape")]
    NotOnTape(usize),

    #[error("non-finite activation produced by layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("non-finite loss ({loss}); parameter norm {param_norm:.6e}")]
    NonFiniteLoss { loss: f64, param_norm: f64 },

    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(&'static str),

    #[error("invalid model specification: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("operation requires a variational model")]
    NotVariational,

    #[error("train-mode forward of a variational layer requires a random stream")]
    MissingRng,

    #[error("episode request exceeds the per-class pool: {requested} > {available}")]
    PoolExhausted { requested: usize, available: usize },

    #[error("meta-step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("round {round} failed: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
