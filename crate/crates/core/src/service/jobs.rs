use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Work the queue can run against a project.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JobKind {
    Invert,
    ExtractPose,
    /// One tree level, or every stale node when `level` is absent.
    GenerateLevel {
        #[serde(default)]
        level: Option<usize>,
    },
    /// Regenerates `nodes`, by default the node and all its descendants.
    RegenerateSubtree {
        node: usize,
        #[serde(default)]
        nodes: Option<BTreeSet<usize>>,
    },
    Evaluate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn can_become(self, next: JobStatus) -> bool {
        matches!(
            (self, next),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        )
    }

    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub id: String,
    pub project_id: String,
    #[serde(flatten)]
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
}

impl Job {
    pub fn new(id: String, project_id: String, kind: JobKind) -> Self {
        Self {
            id,
            project_id,
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            error: None,
            result: None,
        }
    }

    /// Moves to `next` if the transition is legal; returns whether it was.
    pub fn transition(&mut self, next: JobStatus) -> bool {
        if !self.status.can_become(next) {
            return false;
        }
        self.status = next;
        if next == JobStatus::Done {
            self.progress = 1.0;
        }
        true
    }

    /// Progress never moves backwards.
    pub fn advance(&mut self, p: f64) {
        if p.is_finite() {
            self.progress = self.progress.max(p.clamp(0.0, 1.0));
        }
    }
}
