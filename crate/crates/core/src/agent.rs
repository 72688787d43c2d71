//! Optional HTTP client for the two external-service touchpoints: turning
//! a natural-language question into a task-profile candidate, and narrating
//! a finished report. Profile parsing surfaces every failure; narration is
//! allowed to fail soft at the call site, which falls back to the template.

use serde::Serialize;
use thiserror::Error;

use crate::profile::{catalog_summary, validate_task_profile, ProfileError, TaskProfile};
use crate::store::Catalog;

pub const ENDPOINT_VAR: &str = "RELANA_AGENT_ENDPOINT";
pub const TOKEN_VAR: &str = "RELANA_AGENT_TOKEN";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent client is not configured: set {ENDPOINT_VAR}")]
    NotConfigured,
    #[error("agent request failed: {0}")]
    Http(String),
    #[error("agent response is not usable JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

pub trait AgentClient {
    /// Ask the remote agent to draft a task profile from a question.
    /// Returns the raw JSON candidate; validation happens at the caller.
    fn parse_nlq(&self, nlq: &str, catalog: &serde_json::Value) -> Result<serde_json::Value>;

    /// Ask the remote agent for a prose narrative over a report summary.
    fn narrate(&self, report: &serde_json::Value) -> Result<String>;
}

/// Blocking JSON-over-HTTP client. One POST per call; the payload carries a
/// `kind` field so a single endpoint can serve both operations.
pub struct HttpAgentClient {
    endpoint: String,
    token: Option<String>,
}

impl HttpAgentClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>) -> Self {
        HttpAgentClient { endpoint: endpoint.into(), token }
    }

    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| AgentError::NotConfigured)?;
        Ok(Self::new(endpoint, std::env::var(TOKEN_VAR).ok()))
    }

    fn post(&self, body: &impl Serialize) -> Result<serde_json::Value> {
        let mut req = ureq::post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("authorization", &format!("Bearer {token}"));
        }
        let mut res = req.send_json(body).map_err(|e| AgentError::Http(e.to_string()))?;
        res.body_mut().read_json().map_err(|e| AgentError::Json(e.to_string()))
    }
}

impl AgentClient for HttpAgentClient {
    fn parse_nlq(&self, nlq: &str, catalog: &serde_json::Value) -> Result<serde_json::Value> {
        self.post(&serde_json::json!({
            "kind": "parse_nlq",
            "nlq": nlq,
            "catalog_summary": catalog,
        }))
    }

    fn narrate(&self, report: &serde_json::Value) -> Result<String> {
        let v = self.post(&serde_json::json!({
            "kind": "narrate",
            "report": report,
        }))?;
        match v {
            serde_json::Value::String(s) => Ok(s),
            serde_json::Value::Object(map) => match map.get("narrative") {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                _ => Err(AgentError::Json("expected a \"narrative\" string field".into())),
            },
            other => Err(AgentError::Json(format!("expected narrative text, got {other}"))),
        }
    }
}

/// Full NLQ path: remote draft, then the same schema validation every
/// hand-written profile goes through. Failures surface as errors; there is
/// no silent fallback profile.
pub fn agent_parse_nlq(
    client: &dyn AgentClient,
    nlq: &str,
    catalog: &Catalog,
) -> Result<TaskProfile> {
    let summary = catalog_summary(catalog);
    let candidate = client.parse_nlq(nlq, &summary)?;
    Ok(validate_task_profile(&candidate, catalog)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::load_catalog;
    use serde_json::json;
    use std::io::{Read, Write};
    use std::sync::mpsc;

    fn toy_catalog() -> (tempfile::TempDir, Catalog) {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("schema.json"),
            json!({"tables": [
                {"name": "users", "file": "users.csv", "columns": [
                    {"name": "id", "kind": "categorical", "pk": true},
                    {"name": "churn", "kind": "numerical"}
                ]}
            ]})
            .to_string(),
        )
        .unwrap();
        let catalog = load_catalog(dir.path()).unwrap();
        (dir, catalog)
    }

    struct CannedClient(serde_json::Value);

    impl AgentClient for CannedClient {
        fn parse_nlq(&self, _: &str, _: &serde_json::Value) -> Result<serde_json::Value> {
            Ok(self.0.clone())
        }
        fn narrate(&self, _: &serde_json::Value) -> Result<String> {
            Ok("canned".into())
        }
    }

    #[test]
    fn valid_remote_profile_is_accepted() {
        let (_dir, catalog) = toy_catalog();
        let client = CannedClient(json!({
            "task_name": "churn",
            "task_type": "classification",
            "target_table": "users",
            "target_column": "churn",
        }));
        let profile = agent_parse_nlq(&client, "who churns?", &catalog).unwrap();
        assert_eq!(profile.target_table, "users");
        assert_eq!(profile.task_type, crate::profile::TaskType::Classification);
    }

    #[test]
    fn malformed_and_misaligned_remote_answers_surface_as_errors() {
        let (_dir, catalog) = toy_catalog();
        let junk = CannedClient(json!("not a profile"));
        assert!(matches!(
            agent_parse_nlq(&junk, "q", &catalog),
            Err(AgentError::Profile(ProfileError::Json(_)))
        ));
        let unknown = CannedClient(json!({
            "task_name": "t",
            "task_type": "classification",
            "target_table": "ghosts",
            "target_column": "churn",
        }));
        assert!(matches!(
            agent_parse_nlq(&unknown, "q", &catalog),
            Err(AgentError::Profile(ProfileError::Invalid(_)))
        ));
    }

    /// Minimal single-request HTTP server on a loopback port. Captures the
    /// request text and answers with the given JSON body.
    fn serve_once(body: String, captured: mpsc::Sender<String>) -> String {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = Vec::new();
            let mut tmp = [0u8; 4096];
            let header_end = loop {
                let n = sock.read(&mut tmp).unwrap();
                assert!(n > 0, "client closed before finishing the request");
                buf.extend_from_slice(&tmp[..n]);
                if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
                    break pos + 4;
                }
            };
            let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
            let content_length: usize = head
                .lines()
                .find_map(|l| l.to_ascii_lowercase().strip_prefix("content-length:").map(|v| v.trim().parse().unwrap()))
                .unwrap_or(0);
            while buf.len() < header_end + content_length {
                let n = sock.read(&mut tmp).unwrap();
                buf.extend_from_slice(&tmp[..n]);
            }
            captured.send(String::from_utf8_lossy(&buf).into_owned()).unwrap();
            let response = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{}",
                body.len(),
                body
            );
            sock.write_all(response.as_bytes()).unwrap();
        });
        format!("http://{addr}")
    }

    #[test]
    fn http_client_round_trips_profile_parsing() {
        let (tx, rx) = mpsc::channel();
        let endpoint = serve_once(
            json!({
                "task_name": "churn",
                "task_type": "classification",
                "target_table": "users",
                "target_column": "churn",
            })
            .to_string(),
            tx,
        );
        let client = HttpAgentClient::new(endpoint, Some("sekrit".into()));
        let got = client.parse_nlq("who churns?", &json!({"tables": []})).unwrap();
        assert_eq!(got["target_table"], "users");
        let request = rx.recv().unwrap();
        assert!(request.contains("authorization: Bearer sekrit") || request.contains("Authorization: Bearer sekrit"));
        assert!(request.contains("who churns?"));
        assert!(request.contains("parse_nlq"));
    }

    #[test]
    fn http_client_extracts_narratives_and_reports_failures() {
        let (tx, _rx) = mpsc::channel();
        let endpoint = serve_once(json!({"narrative": "all good"}).to_string(), tx);
        let client = HttpAgentClient::new(endpoint, None);
        assert_eq!(client.narrate(&json!({})).unwrap(), "all good");

        // Nothing listens on a fresh loopback port once its listener drops.
        let dead = {
            let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            format!("http://{}", l.local_addr().unwrap())
        };
        let failing = HttpAgentClient::new(dead, None);
        assert!(matches!(failing.narrate(&json!({})), Err(AgentError::Http(_))));
    }

    #[test]
    fn narrate_rejects_non_narrative_payloads() {
        let (tx, _rx) = mpsc::channel();
        let endpoint = serve_once(json!({"unexpected": 1}).to_string(), tx);
        let client = HttpAgentClient::new(endpoint, None);
        assert!(matches!(client.narrate(&json!({})), Err(AgentError::Json(_))));
    }
}
