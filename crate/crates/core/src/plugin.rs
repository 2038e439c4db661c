//! Line-delimited JSON protocol for out-of-process model adapters.
//!
//! Real backends (pretrained auto-encoders, diffusion priors, embedders) run
//! as separate processes. Each request is one JSON object per line,
//! `{"id": n, "method": "...", "params": {...}}`, answered by
//! `{"id": n, "result": ...}` or `{"id": n, "error": "..."}`. Tensors travel as
//! `{"shape": [...], "data": "<base64 little-endian f64>"}`.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use base64::Engine;
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Environment variable naming the root directory of model weights.
pub const WEIGHTS_ENV: &str = "LATEDIT_WEIGHTS";

/// Upper bound on elements in a decoded tensor (guards allocations).
const MAX_WIRE_ELEMENTS: usize = 1 << 28;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTensor {
    pub shape: Vec<usize>,
    pub data: String,
}

impl WireTensor {
    pub fn encode<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        let mut bytes = Vec::with_capacity(a.len() * 8);
        for v in a.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: a.shape().to_vec(),
            data: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<ArrayD<f64>> {
        let n = self
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= MAX_WIRE_ELEMENTS)
            .ok_or_else(|| Error::Format(format!("tensor shape {:?} too large", self.shape)))?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 tensor: {e}")))?;
        if bytes.len() != n * 8 {
            return Err(Error::Format(format!(
                "tensor {:?} needs {} bytes, got {}",
                self.shape,
                n * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("tensor contains non-finite values".into()));
        }
        ArrayD::from_shape_vec(IxDyn(&self.shape), values).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn decode_dim<D: ndarray::Dimension>(&self) -> Result<ndarray::Array<f64, D>> {
        self.decode()?
            .into_dimensionality::<D>()
            .map_err(|e| Error::Format(format!("tensor rank: {e}")))
    }
}

#[derive(Debug, Serialize)]
struct Request<'a> {
    id: u64,
    method: &'a str,
    params: Value,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Response {
    pub id: u64,
    #[serde(default)]
    pub result: Option<Value>,
    #[serde(default)]
    pub error: Option<String>,
}

/// Parses one response line.
pub fn parse_response(line: &str) -> Result<Response> {
    let r: Response = serde_json::from_str(line.trim_end())?;
    match (&r.result, &r.error) {
        (Some(_), None) | (None, Some(_)) => Ok(r),
        _ => Err(Error::Format("response must carry exactly one of result/error".into())),
    }
}

struct Channel {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    next_id: u64,
}

/// A connection to one adapter process. Calls are serialized.
pub struct PluginClient {
    channel: Mutex<Channel>,
    child: Option<Mutex<Child>>,
    name: String,
}

impl std::fmt::Debug for PluginClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PluginClient").field("name", &self.name).finish()
    }
}

/// How to launch an adapter process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginSpec {
    pub command: String,
    #[serde(default)]
    pub args: Vec<String>,
    pub model_id: String,
}

impl PluginSpec {
    /// `$LATEDIT_WEIGHTS/<model_id>`, when the variable is set.
    pub fn weights_dir(&self) -> Option<PathBuf> {
        std::env::var_os(WEIGHTS_ENV).map(|root| PathBuf::from(root).join(&self.model_id))
    }
}

impl PluginClient {
    pub fn from_streams(
        name: impl Into<String>,
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
    ) -> Self {
        Self {
            channel: Mutex::new(Channel {
                reader: Box::new(reader),
                writer: Box::new(writer),
                next_id: 1,
            }),
            child: None,
            name: name.into(),
        }
    }

    pub fn spawn(spec: &PluginSpec) -> Result<Self> {
        let mut cmd = Command::new(&spec.command);
        cmd.args(&spec.args).arg("--model").arg(&spec.model_id);
        if let Some(w) = spec.weights_dir() {
            cmd.arg("--weights").arg(w);
        }
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Backend(format!("cannot start adapter {:?}: {e}", spec.command)))?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout: ChildStdout = child.stdout.take().expect("piped stdout");
        let mut client = Self::from_streams(spec.model_id.clone(), BufReader::new(stdout), stdin);
        client.child = Some(Mutex::new(child));
        Ok(client)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, method: &str, params: Value) -> Result<Value> {
        let mut ch = self.channel.lock().map_err(|_| Error::Backend("adapter channel poisoned".into()))?;
        let id = ch.next_id;
        ch.next_id += 1;
        let mut line = serde_json::to_string(&Request { id, method, params })?;
        line.push('\n');
        ch.writer
            .write_all(line.as_bytes())
            .and_then(|_| ch.writer.flush())
            .map_err(|e| Error::Backend(format!("{}: write failed: {e}", self.name)))?;
        let mut reply = String::new();
        let n = ch
            .reader
            .read_line(&mut reply)
            .map_err(|e| Error::Backend(format!("{}: read failed: {e}", self.name)))?;
        if n == 0 {
            return Err(Error::Backend(format!("{}: adapter closed the connection", self.name)));
        }
        let resp = parse_response(&reply)?;
        if resp.id != id {
            return Err(Error::Backend(format!("{}: reply id {} != request id {id}", self.name, resp.id)));
        }
        match (resp.result, resp.error) {
            (_, Some(e)) => Err(Error::Backend(format!("{}: {e}", self.name))),
            (Some(v), None) => Ok(v),
            (None, None) => unreachable!("validated by parse_response"),
        }
    }

    pub fn call_as<T: serde::de::DeserializeOwned>(&self, method: &str, params: Value) -> Result<T> {
        Ok(serde_json::from_value(self.call(method, params)?)?)
    }
}

impl Drop for PluginClient {
    fn drop(&mut self) {
        if let Some(child) = &self.child {
            if let Ok(mut c) = child.lock() {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wire_tensor_round_trip() {
        let a = array![[1.5, -2.0], [0.0, 3.25]];
        let w = WireTensor::encode(&a);
        assert_eq!(w.shape, vec![2, 2]);
        assert_eq!(w.decode_dim::<ndarray::Ix2>().unwrap(), a);
    }

    #[test]
    fn wire_tensor_rejects_bad_payloads() {
        let bad_len = WireTensor {
            shape: vec![3],
            data: base64::engine::general_purpose::STANDARD.encode([0u8; 16]),
        };
        assert!(bad_len.decode().is_err());
        let huge = WireTensor {
            shape: vec![usize::MAX, 2],
            data: String::new(),
        };
        assert!(huge.decode().is_err());
        let nan = WireTensor::encode(&array![f64::NAN]);
        assert!(nan.decode().is_err());
    }

    #[test]
    fn response_parsing() {
        assert!(parse_response(r#"{"id":1,"result":3}"#).is_ok());
        assert!(parse_response(r#"{"id":1,"error":"boom"}"#).is_ok());
        assert!(parse_response(r#"{"id":1}"#).is_err());
        assert!(parse_response(r#"{"id":1,"result":1,"error":"x"}"#).is_err());
        assert!(parse_response("not json").is_err());
    }

    #[test]
    fn client_round_trip_and_errors() {
        let client = testing::serve("echo", |method, params| match method {
            "echo" => Ok(params.clone()),
            _ => Err(format!("unknown method {method}")),
        });
        assert_eq!(client.call("echo", serde_json::json!({"a": 1})).unwrap()["a"], 1);
        let err = client.call("nope", Value::Null).unwrap_err();
        assert!(matches!(err, Error::Backend(m) if m.contains("unknown method")));
    }

    #[test]
    fn spawn_failure_is_backend_error() {
        let spec = PluginSpec {
            command: "/nonexistent/latedit-adapter".into(),
            args: vec![],
            model_id: "shap-e".into(),
        };
        assert!(matches!(PluginClient::spawn(&spec), Err(Error::Backend(_))));
    }
}
