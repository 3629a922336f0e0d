//! Failure alerts.
//!
//! Every notification goes to each configured sink independently: a
//! chat-style incoming webhook, the log, and an in-memory ring buffer that
//! the status API exposes. A failing sink never affects the others or the
//! caller.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_BUFFER_SIZE: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Notification {
    pub severity: Severity,
    pub repository: String,
    #[serde(rename = "ref")]
    pub ref_name: String,
    pub run_url: String,
    pub run_number: u64,
    pub message: String,
    pub emitted_at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("notification rejected: {0} must not be empty")]
pub struct InvalidNotification(pub &'static str);

impl Notification {
    pub fn error(
        repository: impl Into<String>,
        ref_name: impl Into<String>,
        run_url: impl Into<String>,
        run_number: u64,
        message: impl Into<String>,
    ) -> Self {
        Self {
            severity: Severity::Error,
            repository: repository.into(),
            ref_name: ref_name.into(),
            run_url: run_url.into(),
            run_number,
            message: message.into(),
            emitted_at: Utc::now(),
        }
    }

    pub fn validate(&self) -> Result<(), InvalidNotification> {
        if self.repository.trim().is_empty() {
            return Err(InvalidNotification("repository"));
        }
        if self.ref_name.trim().is_empty() {
            return Err(InvalidNotification("ref"));
        }
        if self.run_url.trim().is_empty() {
            return Err(InvalidNotification("run_url"));
        }
        if self.run_number == 0 {
            return Err(InvalidNotification("run_number"));
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            ":x: {} `{}` run #{} failed: {} ({})",
            self.repository, self.ref_name, self.run_number, self.message, self.run_url
        )
    }

    /// Body posted to the incoming webhook.
    pub fn payload(&self) -> Value {
        json!({
            "text": self.summary(),
            "repository": self.repository,
            "ref": self.ref_name,
            "run_url": self.run_url,
            "run_number": self.run_number,
            "message": self.message,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "result", content = "reason", rename_all = "lowercase")]
pub enum Delivery {
    Delivered,
    Dropped(String),
}

#[async_trait]
pub trait NotificationSink: Send + Sync {
    fn name(&self) -> &str;
    async fn deliver(&self, n: &Notification) -> Delivery;
}

pub struct WebhookSink {
    url: String,
    client: reqwest::Client,
}

impl WebhookSink {
    pub fn new(url: impl Into<String>) -> Self {
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(5))
            .build()
            .expect("http client");
        Self { url: url.into(), client }
    }
}

#[async_trait]
impl NotificationSink for WebhookSink {
    fn name(&self) -> &str {
        "webhook"
    }

    async fn deliver(&self, n: &Notification) -> Delivery {
        match self.client.post(&self.url).json(&n.payload()).send().await {
            Ok(resp) if resp.status().is_success() => Delivery::Delivered,
            Ok(resp) => Delivery::Dropped(format!("http {}", resp.status())),
            Err(err) => Delivery::Dropped(format!("network: {err}")),
        }
    }
}

pub struct LogSink;

#[async_trait]
impl NotificationSink for LogSink {
    fn name(&self) -> &str {
        "log"
    }

    async fn deliver(&self, n: &Notification) -> Delivery {
        tracing::error!(
            repository = %n.repository,
            r#ref = %n.ref_name,
            run_url = %n.run_url,
            run_number = n.run_number,
            "{}",
            n.message
        );
        Delivery::Delivered
    }
}

/// Bounded buffer of the most recent notifications.
pub struct RingBuffer {
    capacity: usize,
    items: Mutex<VecDeque<Notification>>,
}

impl RingBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), items: Mutex::new(VecDeque::new()) }
    }

    pub fn push(&self, n: Notification) {
        let mut items = self.items.lock().unwrap_or_else(|e| e.into_inner());
        if items.len() == self.capacity {
            items.pop_front();
        }
        items.push_back(n);
    }

    pub fn snapshot(&self) -> Vec<Notification> {
        self.items.lock().unwrap_or_else(|e| e.into_inner()).iter().cloned().collect()
    }
}

#[async_trait]
impl NotificationSink for RingBuffer {
    fn name(&self) -> &str {
        "buffer"
    }

    async fn deliver(&self, n: &Notification) -> Delivery {
        self.push(n.clone());
        Delivery::Delivered
    }
}

pub struct Notifier {
    buffer: Arc<RingBuffer>,
    sinks: Vec<Arc<dyn NotificationSink>>,
}

impl Notifier {
    /// Log and buffer sinks, plus the webhook sink when a URL is given.
    pub fn new(webhook_url: Option<&str>, buffer_size: usize) -> Self {
        let buffer = Arc::new(RingBuffer::new(buffer_size));
        let mut sinks: Vec<Arc<dyn NotificationSink>> = Vec::new();
        if let Some(url) = webhook_url {
            sinks.push(Arc::new(WebhookSink::new(url)));
        }
        sinks.push(Arc::new(LogSink));
        sinks.push(buffer.clone());
        Self { buffer, sinks }
    }

    pub fn add_sink(&mut self, sink: Arc<dyn NotificationSink>) {
        self.sinks.push(sink);
    }

    pub fn buffer(&self) -> &RingBuffer {
        &self.buffer
    }

    /// Delivers to every sink and reports each sink's result.
    pub async fn notify_failure(
        &self,
        n: &Notification,
    ) -> Result<Vec<(String, Delivery)>, InvalidNotification> {
        n.validate()?;
        let mut results = Vec::with_capacity(self.sinks.len());
        for sink in &self.sinks {
            let outcome = sink.deliver(n).await;
            if let Delivery::Dropped(reason) = &outcome {
                tracing::warn!(sink = sink.name(), "notification dropped: {reason}");
            }
            results.push((sink.name().to_owned(), outcome));
        }
        Ok(results)
    }
}

impl Default for Notifier {
    fn default() -> Self {
        Self::new(None, DEFAULT_BUFFER_SIZE)
    }
}
