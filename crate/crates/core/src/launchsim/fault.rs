use std::fmt;
use std::str::FromStr;

use super::SimError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    Acquire,
    Start,
    Join,
    Run,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    /// After writing the in-progress record.
    AfterInProgress,
    /// After the artifact is published, before the complete record.
    AfterMigrate,
}

/// An injected failure and the condition that triggers it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// The registry pull fails.
    PullFails,
    /// Store writes fail during migration.
    MigrateWriteFails,
    /// The writer's node dies.
    WriterCrash(CrashPoint),
    /// The engine fails to start the container on a node; `None` is every
    /// node.
    StartFails(Option<u32>),
    /// The namespace handle of one rank's node is unavailable to it.
    JoinFailsRank(u32),
    /// The shim record of a node is lost before any rank joins.
    JoinFailsNode(u32),
    /// A rank exits with a non-zero code.
    RankCrash { rank: u32, code: i32 },
}

impl Fault {
    pub fn point(&self) -> FaultPoint {
        match self {
            Fault::PullFails | Fault::MigrateWriteFails | Fault::WriterCrash(_) => {
                FaultPoint::Acquire
            }
            Fault::StartFails(_) => FaultPoint::Start,
            Fault::JoinFailsRank(_) | Fault::JoinFailsNode(_) => FaultPoint::Join,
            Fault::RankCrash { .. } => FaultPoint::Run,
        }
    }
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::PullFails => write!(f, "acquire:pull"),
            Fault::MigrateWriteFails => write!(f, "acquire:migrate"),
            Fault::WriterCrash(CrashPoint::AfterInProgress) => {
                write!(f, "acquire:crash-after-in-progress")
            }
            Fault::WriterCrash(CrashPoint::AfterMigrate) => {
                write!(f, "acquire:crash-after-migrate")
            }
            Fault::StartFails(None) => write!(f, "start:all"),
            Fault::StartFails(Some(n)) => write!(f, "start:node={n}"),
            Fault::JoinFailsRank(r) => write!(f, "join:rank={r}"),
            Fault::JoinFailsNode(n) => write!(f, "join:node={n}"),
            Fault::RankCrash { rank, code } => write!(f, "run:rank={rank}:code={code}"),
        }
    }
}

fn number<T: FromStr>(spec: &str, field: &str, prefix: &str) -> Result<T, SimError> {
    field
        .strip_prefix(prefix)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| SimError::BadFault {
            spec: spec.to_string(),
            reason: format!("expected {prefix}<number>"),
        })
}

impl FromStr for Fault {
    type Err = SimError;

    /// `acquire:pull`, `acquire:migrate`, `acquire:crash-after-in-progress`,
    /// `acquire:crash-after-migrate`, `start:all`, `start:node=N`,
    /// `join:rank=R`, `join:node=N`, `run:rank=R:code=C`.
    fn from_str(s: &str) -> Result<Self, SimError> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = |reason: &str| SimError::BadFault {
            spec: s.to_string(),
            reason: reason.to_string(),
        };
        match parts.as_slice() {
            ["acquire", "pull"] => Ok(Fault::PullFails),
            ["acquire", "migrate"] => Ok(Fault::MigrateWriteFails),
            ["acquire", "crash-after-in-progress"] => {
                Ok(Fault::WriterCrash(CrashPoint::AfterInProgress))
            }
            ["acquire", "crash-after-migrate"] => Ok(Fault::WriterCrash(CrashPoint::AfterMigrate)),
            ["start", "all"] => Ok(Fault::StartFails(None)),
            ["start", n] => Ok(Fault::StartFails(Some(number(s, n, "node=")?))),
            ["join", t] if t.starts_with("rank=") => {
                Ok(Fault::JoinFailsRank(number(s, t, "rank=")?))
            }
            ["join", t] => Ok(Fault::JoinFailsNode(number(s, t, "node=")?)),
            ["run", r, c] => Ok(Fault::RankCrash {
                rank: number(s, r, "rank=")?,
                code: number(s, c, "code=")?,
            }),
            [point, ..] if !["acquire", "start", "join", "run"].contains(point) => {
                Err(bad("unknown failure point (acquire|start|join|run)"))
            }
            _ => Err(bad("unknown trigger")),
        }
    }
}
