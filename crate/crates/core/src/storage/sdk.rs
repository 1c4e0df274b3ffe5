use std::time::Duration;

use serde_json::Value;

use super::{CargoRequest, MatchReply, ReadReply, Record, WriteAck};
use crate::netharness::{Endpoint, SharedTransport};
use crate::proto::{request, CallError};

/// Storage SDK handle bound to one Cargo access point for one service.
#[derive(Clone)]
pub struct CargoClient {
    net: SharedTransport,
    src: String,
    service_id: String,
    cargo: Endpoint,
    timeout: Option<Duration>,
}

impl CargoClient {
    /// `InitCargo`: checks the cargo hosts the service before returning a handle.
    pub async fn init(net: SharedTransport, src: &str, service_id: &str, cargo: Endpoint) -> Result<Self, CallError> {
        let c = CargoClient {
            net,
            src: src.to_string(),
            service_id: service_id.to_string(),
            cargo,
            timeout: None,
        };
        let _: Value = c
            .call(&CargoRequest::InitCargo {
                service_id: c.service_id.clone(),
            })
            .await?;
        Ok(c)
    }

    /// A handle without the `InitCargo` round trip.
    pub fn attach(net: SharedTransport, src: &str, service_id: &str, cargo: Endpoint) -> Self {
        CargoClient {
            net,
            src: src.to_string(),
            service_id: service_id.to_string(),
            cargo,
            timeout: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn cargo(&self) -> &Endpoint {
        &self.cargo
    }

    async fn call<R: serde::de::DeserializeOwned>(&self, req: &CargoRequest) -> Result<R, CallError> {
        request(self.net.as_ref(), &self.src, &self.cargo, req, self.timeout).await
    }

    pub async fn read(&self, key: &str) -> Result<Option<Record>, CallError> {
        let r: ReadReply = self
            .call(&CargoRequest::Read {
                service_id: self.service_id.clone(),
                key: key.to_string(),
            })
            .await?;
        Ok(r.record)
    }

    pub async fn write(&self, key: &str, value: Vec<u8>) -> Result<WriteAck, CallError> {
        self.call(&CargoRequest::Write {
            service_id: self.service_id.clone(),
            key: key.to_string(),
            value,
        })
        .await
    }

    pub async fn vector_match(&self, query: Vec<f64>, threshold: f64) -> Result<MatchReply, CallError> {
        self.call(&CargoRequest::VectorMatch {
            service_id: self.service_id.clone(),
            query,
            threshold,
        })
        .await
    }

    /// `CloseCargo`.
    pub async fn close(self) -> Result<(), CallError> {
        let _: Value = self
            .call(&CargoRequest::CloseCargo {
                service_id: self.service_id.clone(),
            })
            .await?;
        Ok(())
    }
}
