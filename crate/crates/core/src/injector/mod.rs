//! Workflow injection: a plan of workflows handed to the engine one at a
//! time over a newline-delimited JSON message boundary.

mod transport;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub use transport::{
    channel_pair, resolve_endpoint, ChannelTransport, EngineListener, RecordingTransport,
    StreamTransport, Transport, TranscriptEntry, ENDPOINT_ENV,
};

use crate::engine::WorkflowSource;
use crate::workflow::{from_value, WorkflowError, WorkflowSpec};

#[derive(Debug, Error)]
pub enum InjectorError {
    #[error("workflow file {0:?} does not exist")]
    MissingFile(String),
    #[error("could not read {path:?}: {reason}")]
    Io { path: String, reason: String },
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error("repeat count must be at least 1")]
    InvalidRepeat,
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("peer disconnected")]
    Disconnected,
    #[error("engine rejected the workflow: {0}")]
    NackFromEngine(String),
    #[error("initial workflow already sent")]
    AlreadyStarted,
    #[error("initial workflow has not been sent")]
    NotStarted,
    #[error("protocol violation: expected {expected}, got {got}")]
    ProtocolViolation { expected: String, got: String },
    #[error("malformed frame: {0}")]
    BadFrame(String),
    #[error("transport error: {0}")]
    Transport(String),
}

/// One frame on the wire: `{"type": ..., "payload": ...}` followed by LF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload")]
pub enum WireMessage {
    SubmitWorkflow(WorkflowPayload),
    NextWorkflowRequest,
    /// `Some(reason)` rejects the submission.
    Ack(Option<String>),
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowPayload {
    pub name: String,
    /// Task map in the workflow file format.
    pub workflow: Value,
}

impl WireMessage {
    pub fn type_name(&self) -> &'static str {
        match self {
            WireMessage::SubmitWorkflow(_) => "SubmitWorkflow",
            WireMessage::NextWorkflowRequest => "NextWorkflowRequest",
            WireMessage::Ack(_) => "Ack",
            WireMessage::Done => "Done",
        }
    }

    pub fn submit(spec: &WorkflowSpec) -> Self {
        WireMessage::SubmitWorkflow(WorkflowPayload {
            name: spec.name().to_string(),
            workflow: spec.to_value(),
        })
    }

    /// One line of UTF-8 JSON, LF-terminated.
    pub fn encode(&self) -> String {
        let mut line = serde_json::to_string(self).expect("wire messages always serialize");
        line.push('\n');
        line
    }

    pub fn decode(line: &str) -> Result<Self, InjectorError> {
        let body = line.strip_suffix('\n').unwrap_or(line);
        if body.contains('\n') {
            return Err(InjectorError::BadFrame("embedded newline".into()));
        }
        serde_json::from_str(body).map_err(|e| InjectorError::BadFrame(e.to_string()))
    }
}

/// Workflows to inject, cycled `repeat` times.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    workflows: Vec<WorkflowSpec>,
    repeat: usize,
    cursor: usize,
}

impl InjectionPlan {
    pub fn new(workflows: Vec<WorkflowSpec>, repeat: usize) -> Result<Self, InjectorError> {
        if repeat == 0 || workflows.is_empty() {
            return Err(InjectorError::InvalidRepeat);
        }
        Ok(InjectionPlan {
            workflows,
            repeat,
            cursor: 0,
        })
    }

    pub fn total(&self) -> usize {
        self.workflows.len() * self.repeat
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn repeat(&self) -> usize {
        self.repeat
    }

    pub fn workflows(&self) -> &[WorkflowSpec] {
        &self.workflows
    }

    fn current(&self) -> Option<&WorkflowSpec> {
        (self.cursor < self.total()).then(|| &self.workflows[self.cursor % self.workflows.len()])
    }
}

/// Reads one workflow file into a plan. The file stem names the workflow.
pub fn load_plan(path: impl AsRef<Path>, repeat: usize) -> Result<InjectionPlan, InjectorError> {
    let path = path.as_ref();
    if repeat == 0 {
        return Err(InjectorError::InvalidRepeat);
    }
    if !path.exists() {
        return Err(InjectorError::MissingFile(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| InjectorError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "workflow".into());
    let spec = crate::workflow::parse_workflow(&text)?.with_name(&name);
    InjectionPlan::new(vec![spec], repeat)
}

/// The injector's side of the connection.
pub struct Injector<T: Transport> {
    plan: InjectionPlan,
    transport: T,
}

impl<T: Transport> Injector<T> {
    pub fn new(plan: InjectionPlan, transport: T) -> Self {
        Injector { plan, transport }
    }

    pub fn plan(&self) -> &InjectionPlan {
        &self.plan
    }

    /// Sends the first workflow and waits for its acknowledgement.
    pub fn send_initial(&mut self) -> Result<(), InjectorError> {
        if self.plan.cursor != 0 {
            return Err(InjectorError::AlreadyStarted);
        }
        self.submit_current()
    }

    /// Answers next-workflow requests until the plan is exhausted. Returns
    /// the number of workflows delivered.
    pub fn serve_next(&mut self) -> Result<usize, InjectorError> {
        if self.plan.cursor == 0 {
            return Err(InjectorError::NotStarted);
        }
        loop {
            match self.transport.recv()? {
                WireMessage::NextWorkflowRequest => {
                    if self.plan.current().is_some() {
                        self.submit_current()?;
                    } else {
                        self.transport.send(&WireMessage::Done)?;
                        return Ok(self.plan.cursor);
                    }
                }
                other => {
                    return Err(InjectorError::ProtocolViolation {
                        expected: "NextWorkflowRequest".into(),
                        got: other.type_name().into(),
                    })
                }
            }
        }
    }

    /// `send_initial` followed by `serve_next`.
    pub fn run(mut self) -> Result<usize, InjectorError> {
        self.send_initial()?;
        self.serve_next()
    }

    fn submit_current(&mut self) -> Result<(), InjectorError> {
        let msg = WireMessage::submit(self.plan.current().expect("caller checked"));
        self.transport.send(&msg)?;
        match self.transport.recv()? {
            WireMessage::Ack(None) => {
                self.plan.cursor += 1;
                Ok(())
            }
            WireMessage::Ack(Some(reason)) => Err(InjectorError::NackFromEngine(reason)),
            other => Err(InjectorError::ProtocolViolation {
                expected: "Ack".into(),
                got: other.type_name().into(),
            }),
        }
    }
}

/// The engine's side of the connection, usable as a workflow source.
pub struct EngineEndpoint<T: Transport> {
    transport: T,
    received: usize,
}

impl<T: Transport> EngineEndpoint<T> {
    pub fn new(transport: T) -> Self {
        EngineEndpoint {
            transport,
            received: 0,
        }
    }

    pub fn received(&self) -> usize {
        self.received
    }

    fn receive_submission(&mut self) -> Result<Option<WorkflowSpec>, InjectorError> {
        match self.transport.recv()? {
            WireMessage::SubmitWorkflow(payload) => match from_value(&payload.workflow) {
                Ok(spec) => {
                    self.transport.send(&WireMessage::Ack(None))?;
                    self.received += 1;
                    Ok(Some(spec.with_name(&payload.name)))
                }
                Err(e) => {
                    self.transport.send(&WireMessage::Ack(Some(e.to_string())))?;
                    Err(e.into())
                }
            },
            WireMessage::Done => Ok(None),
            other => Err(InjectorError::ProtocolViolation {
                expected: "SubmitWorkflow or Done".into(),
                got: other.type_name().into(),
            }),
        }
    }
}

impl<T: Transport> WorkflowSource for EngineEndpoint<T> {
    fn initial(&mut self) -> Result<Option<WorkflowSpec>, String> {
        self.receive_submission().map_err(|e| e.to_string())
    }

    fn next(&mut self) -> Result<Option<WorkflowSpec>, String> {
        self.transport
            .send(&WireMessage::NextWorkflowRequest)
            .map_err(|e| e.to_string())?;
        self.receive_submission().map_err(|e| e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::builtin_workflow;
    use crate::workflow::BuiltinWorkflow;

    fn pipeline() -> WorkflowSpec {
        builtin_workflow(BuiltinWorkflow::Pipeline, Some(3)).unwrap()
    }

    #[test]
    fn frames_are_single_lines() {
        let msg = WireMessage::submit(&pipeline());
        let line = msg.encode();
        assert!(line.ends_with('\n'));
        assert_eq!(line.matches('\n').count(), 1);
        assert_eq!(WireMessage::decode(&line).unwrap(), msg);
        assert_eq!(WireMessage::Done.encode(), "{\"type\":\"Done\"}\n");
        assert_eq!(
            WireMessage::Ack(None).encode(),
            "{\"type\":\"Ack\",\"payload\":null}\n"
        );
        assert!(WireMessage::decode("{\"type\":\"Done\"}\n{}").is_err());
        assert!(WireMessage::decode("{\"type\":\"Bogus\"}").is_err());
    }

    #[test]
    fn plan_counts() {
        let plan = InjectionPlan::new(vec![pipeline()], 100).unwrap();
        assert_eq!(plan.total(), 100);
        assert_eq!(plan.cursor(), 0);
        assert!(matches!(
            InjectionPlan::new(vec![pipeline()], 0),
            Err(InjectorError::InvalidRepeat)
        ));
    }

    #[test]
    fn load_plan_errors() {
        assert!(matches!(
            load_plan("/nonexistent/workflow.json", 1),
            Err(InjectorError::MissingFile(_))
        ));
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{not json").unwrap();
        assert!(matches!(load_plan(&bad, 1), Err(InjectorError::Workflow(_))));
        let good = dir.path().join("chain.json");
        std::fs::write(&good, pipeline().to_json()).unwrap();
        assert!(matches!(load_plan(&good, 0), Err(InjectorError::InvalidRepeat)));
        let plan = load_plan(&good, 1).unwrap();
        assert_eq!(plan.total(), 1);
        assert_eq!(plan.workflows()[0].name(), "chain");
    }

    #[test]
    fn three_requests_then_done() {
        let (inj_side, eng_side) = channel_pair();
        let plan = InjectionPlan::new(vec![pipeline()], 3).unwrap();
        let handle = std::thread::spawn(move || Injector::new(plan, inj_side).run());
        let mut endpoint = EngineEndpoint::new(eng_side);
        assert!(endpoint.initial().unwrap().is_some());
        assert!(endpoint.next().unwrap().is_some());
        assert!(endpoint.next().unwrap().is_some());
        assert!(endpoint.next().unwrap().is_none());
        assert_eq!(handle.join().unwrap().unwrap(), 3);
        assert_eq!(endpoint.received(), 3);
    }

    #[test]
    fn duplicate_initial_rejected() {
        let (inj_side, mut eng_side) = channel_pair();
        let plan = InjectionPlan::new(vec![pipeline()], 2).unwrap();
        let handle = std::thread::spawn(move || {
            let mut inj = Injector::new(plan, inj_side);
            inj.send_initial()?;
            let again = inj.send_initial();
            Ok::<_, InjectorError>((inj.plan().cursor(), again))
        });
        assert!(matches!(eng_side.recv().unwrap(), WireMessage::SubmitWorkflow(_)));
        eng_side.send(&WireMessage::Ack(None)).unwrap();
        let (cursor, again) = handle.join().unwrap().unwrap();
        assert_eq!(cursor, 1);
        assert!(matches!(again, Err(InjectorError::AlreadyStarted)));
    }

    #[test]
    fn out_of_order_ack_is_violation() {
        let (inj_side, mut eng_side) = channel_pair();
        let plan = InjectionPlan::new(vec![pipeline()], 2).unwrap();
        let handle = std::thread::spawn(move || Injector::new(plan, inj_side).run());
        assert!(matches!(eng_side.recv().unwrap(), WireMessage::SubmitWorkflow(_)));
        eng_side.send(&WireMessage::Ack(None)).unwrap();
        eng_side.send(&WireMessage::Ack(None)).unwrap();
        assert!(matches!(
            handle.join().unwrap(),
            Err(InjectorError::ProtocolViolation { .. })
        ));
    }

    #[test]
    fn nack_surfaces() {
        let (inj_side, mut eng_side) = channel_pair();
        let plan = InjectionPlan::new(vec![pipeline()], 1).unwrap();
        let handle = std::thread::spawn(move || Injector::new(plan, inj_side).run());
        eng_side.recv().unwrap();
        eng_side.send(&WireMessage::Ack(Some("busy".into()))).unwrap();
        assert!(matches!(
            handle.join().unwrap(),
            Err(InjectorError::NackFromEngine(r)) if r == "busy"
        ));
    }

    #[test]
    fn engine_down_refuses_connection() {
        // Bind then drop to find a port with nothing listening.
        let addr = std::net::TcpListener::bind("127.0.0.1:0")
            .unwrap()
            .local_addr()
            .unwrap()
            .to_string();
        let err = StreamTransport::connect(&addr).err().unwrap();
        assert!(matches!(err, InjectorError::ConnectionRefused(_)));
        let (inj_side, eng_side) = channel_pair();
        drop(eng_side);
        let mut inj = Injector::new(InjectionPlan::new(vec![pipeline()], 1).unwrap(), inj_side);
        assert!(inj.send_initial().is_err());
        assert_eq!(inj.plan().cursor(), 0);
    }
}
