//! Error type shared across the crate.

use crate::model::NodeId;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// The link cannot meet the SINR threshold even without interference.
    #[error("noise-dominated link {sender}->{receiver}: power {power} <= {required} required by noise")]
    NoiseDominated {
        sender: NodeId,
        receiver: NodeId,
        power: f64,
        required: f64,
    },

    /// More than one active node remained after the last round.
    #[error("initial construction left {active} active nodes (not connected)")]
    NotConnected { active: usize },

    /// A slotted run hit its slot budget before completing.
    #[error("slot budget of {max_slots} exhausted with {remaining} tasks unfinished")]
    SlotBudgetExceeded { max_slots: u64, remaining: usize },

    /// The capacity loop hit its iteration cap.
    #[error("iteration budget of {max_iterations} exhausted with {remaining} nodes unconnected")]
    IterationBudgetExceeded {
        max_iterations: u32,
        remaining: usize,
    },

    /// Power-control iteration diverged or failed to converge.
    #[error("no feasible power assignment found within {iterations} iterations")]
    NotPowerFeasible { iterations: u32 },

    /// An oracle call exceeded its enumeration budget.
    #[error("oracle budget exceeded: {links} links > {max_links} allowed")]
    BudgetExceeded { links: usize, max_links: usize },

    /// Instance generation kept producing coincident points.
    #[error("degenerate instance: duplicate points after {attempts} attempts")]
    DegenerateInstance { attempts: u32 },

    #[error("bad input: {0}")]
    BadInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn bad_input(msg: impl Into<String>) -> Self {
        Error::BadInput(msg.into())
    }

    /// Process exit code for the CLI: 0 success, 2 verification failure,
    /// 3 budget exceeded, 4 bad input.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::SlotBudgetExceeded { .. }
            | Error::IterationBudgetExceeded { .. }
            | Error::BudgetExceeded { .. } => 3,
            Error::BadInput(_)
            | Error::Io(_)
            | Error::Json(_)
            | Error::DegenerateInstance { .. } => 4,
            _ => 2,
        }
    }
}
