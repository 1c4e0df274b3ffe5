//! Reply envelope shared by every RPC: `{"status": "ok"|"error", "detail", "body"}`.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::netharness::{rpc, Endpoint, NetError, Transport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Ok,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reply {
    pub status: Status,
    #[serde(default)]
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<u16>,
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub body: Value,
}

/// Failure reported by the remote side, or a reply we could not interpret.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("{detail}")]
pub struct RemoteError {
    pub code: Option<u16>,
    pub detail: String,
}

impl Reply {
    pub fn ok<T: Serialize>(body: T) -> Self {
        Reply {
            status: Status::Ok,
            detail: String::new(),
            code: None,
            body: serde_json::to_value(body).expect("reply body serializes"),
        }
    }

    pub fn ok_detail<T: Serialize>(body: T, detail: impl Into<String>) -> Self {
        Reply {
            detail: detail.into(),
            ..Reply::ok(body)
        }
    }

    pub fn error(detail: impl Into<String>) -> Self {
        Reply {
            status: Status::Error,
            detail: detail.into(),
            code: None,
            body: Value::Null,
        }
    }

    pub fn error_code(code: u16, detail: impl Into<String>) -> Self {
        Reply {
            code: Some(code),
            ..Reply::error(detail)
        }
    }

    pub fn with_body<T: Serialize>(mut self, body: T) -> Self {
        self.body = serde_json::to_value(body).expect("reply body serializes");
        self
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("reply serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RemoteError> {
        serde_json::from_slice(bytes).map_err(|e| RemoteError {
            code: None,
            detail: format!("unreadable reply: {e}"),
        })
    }

    /// Body of an ok reply; the remote detail otherwise.
    pub fn into_body<T: DeserializeOwned>(self) -> Result<T, RemoteError> {
        match self.status {
            Status::Ok => serde_json::from_value(self.body).map_err(|e| RemoteError {
                code: None,
                detail: format!("unexpected reply body: {e}"),
            }),
            Status::Error => Err(RemoteError {
                code: self.code,
                detail: self.detail,
            }),
        }
    }
}

impl From<Result<Reply, Reply>> for Reply {
    fn from(r: Result<Reply, Reply>) -> Self {
        match r {
            Ok(r) | Err(r) => r,
        }
    }
}

/// Decodes a tagged request, producing a 400-style error reply on failure.
pub fn decode_request<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, Reply> {
    serde_json::from_slice(bytes).map_err(|e| Reply::error_code(400, format!("malformed request: {e}")))
}

/// Manager a Beacon envelope is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Am,
    Spinner,
    CargoMgr,
}

/// Wraps a tagged request as `{"target", "type", "body"}`.
pub fn envelope<T: Serialize>(target: Target, req: &T) -> Value {
    let mut v = serde_json::to_value(req).expect("request serializes");
    if let Value::Object(m) = &mut v {
        m.insert("target".into(), serde_json::to_value(target).expect("target serializes"));
    }
    v
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CallError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
}

impl CallError {
    pub fn code(&self) -> Option<u16> {
        match self {
            CallError::Remote(e) => e.code,
            CallError::Net(_) => None,
        }
    }
}

/// Sends a request and unwraps the reply body.
pub async fn request<T, R>(
    net: &dyn Transport,
    src: &str,
    dst: &Endpoint,
    req: &T,
    timeout: Option<Duration>,
) -> Result<R, CallError>
where
    T: Serialize + ?Sized + Sync,
    R: DeserializeOwned,
{
    let reply: Reply = rpc(net, src, dst, req, timeout).await?;
    Ok(reply.into_body()?)
}

/// Same as [`request`] but routed through a Beacon.
pub async fn via_beacon<T, R>(
    net: &dyn Transport,
    src: &str,
    beacon: &Endpoint,
    target: Target,
    req: &T,
    timeout: Option<Duration>,
) -> Result<R, CallError>
where
    T: Serialize + Sync,
    R: DeserializeOwned,
{
    request(net, src, beacon, &envelope(target, req), timeout).await
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape() {
        let r = Reply::ok(serde_json::json!({"x": 1}));
        let v: Value = serde_json::from_slice(&r.to_bytes()).unwrap();
        assert_eq!(v["status"], "ok");
        assert_eq!(v["body"]["x"], 1);
        let e = Reply::error_code(400, "bad");
        let v: Value = serde_json::from_slice(&e.to_bytes()).unwrap();
        assert_eq!(v["status"], "error");
        assert_eq!(v["detail"], "bad");
        assert_eq!(v["code"], 400);
    }

    #[test]
    fn envelope_adds_target() {
        #[derive(Serialize)]
        #[serde(tag = "type", content = "body")]
        enum R {
            Ping { n: u8 },
        }
        let v = envelope(Target::CargoMgr, &R::Ping { n: 1 });
        assert_eq!(v["target"], "cargo_mgr");
        assert_eq!(v["type"], "Ping");
        assert_eq!(v["body"]["n"], 1);
    }

    #[test]
    fn body_extraction() {
        assert_eq!(Reply::ok(5u32).into_body::<u32>().unwrap(), 5);
        let err = Reply::error("nope").into_body::<u32>().unwrap_err();
        assert_eq!(err.detail, "nope");
    }
}
