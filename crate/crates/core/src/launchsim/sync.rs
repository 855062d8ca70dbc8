use std::fmt;

use crate::digest::Digest;

/// Per-image synchronization file in the shared store.
pub fn sync_path(reference: &str) -> String {
    format!("sync/{}.sync", Digest::of(reference.as_bytes()).hex())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyncStatus {
    InProgress,
    Complete,
    Failed,
}

impl SyncStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncStatus::InProgress => "in-progress",
            SyncStatus::Complete => "complete",
            SyncStatus::Failed => "failed",
        }
    }

    pub fn is_terminal(self) -> bool {
        self != SyncStatus::InProgress
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyncRecord {
    pub status: SyncStatus,
    /// `-` until the artifact digest is known.
    pub digest: String,
    pub writer: String,
    pub ts_us: u64,
    pub reason: Option<String>,
}

impl SyncRecord {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "status={}\ndigest={}\nwriter={}\nts={}\n",
            self.status.as_str(),
            self.digest,
            self.writer,
            self.ts_us
        );
        if let Some(r) = &self.reason {
            s.push_str(&format!("reason={}\n", r.replace('\n', " ")));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut status = None;
        let mut digest = None;
        let mut writer = None;
        let mut ts = None;
        let mut reason = None;
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("malformed line {line:?}"))?;
            match k {
                "status" => {
                    status = Some(match v {
                        "in-progress" => SyncStatus::InProgress,
                        "complete" => SyncStatus::Complete,
                        "failed" => SyncStatus::Failed,
                        other => return Err(format!("unknown status {other:?}")),
                    })
                }
                "digest" => digest = Some(v.to_string()),
                "writer" => writer = Some(v.to_string()),
                "ts" => ts = Some(v.parse::<u64>().map_err(|e| format!("ts: {e}"))?),
                "reason" => reason = Some(v.to_string()),
                other => return Err(format!("unknown key {other:?}")),
            }
        }
        Ok(SyncRecord {
            status: status.ok_or("missing status")?,
            digest: digest.ok_or("missing digest")?,
            writer: writer.ok_or("missing writer")?,
            ts_us: ts.ok_or("missing ts")?,
            reason,
        })
    }
}

impl fmt::Display for SyncRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{} by {}",
            self.status.as_str(),
            self.ts_us,
            self.writer
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let r = SyncRecord {
            status: SyncStatus::Failed,
            digest: "-".into(),
            writer: "7.0/task0".into(),
            ts_us: 42,
            reason: Some("pull failed".into()),
        };
        assert_eq!(SyncRecord::parse(&r.to_text()).unwrap(), r);
        assert!(SyncRecord::parse("status=done\n").is_err());
    }

    #[test]
    fn path_is_per_image() {
        assert_ne!(sync_path("a:1"), sync_path("a:2"));
        assert!(sync_path("a:1").starts_with("sync/"));
    }
}
