//! Loopback scoring service exposing any backend over the wire protocol.

use std::net::{SocketAddr, TcpListener};
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use tokio::sync::oneshot;

use super::wire::{decode_request, encode_error, encode_response};
use super::{Backend, Oracle};
use crate::error::{Error, OracleError, Result};

pub const EVALUATE_PATH: &str = "/v1/evaluate";

#[derive(Debug, Clone, Copy, Default)]
pub struct ServerOptions {
    /// Also stop on Ctrl-C / SIGINT.
    pub stop_on_interrupt: bool,
}

/// A running server; dropping it shuts the server down.
pub struct ServerHandle {
    local_addr: SocketAddr,
    oracle: Arc<Oracle>,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}{EVALUATE_PATH}", self.local_addr)
    }

    /// Successful evaluations served so far.
    pub fn calls(&self) -> u64 {
        self.oracle.calls()
    }

    /// Blocks until the server stops on its own (interrupt).
    pub fn wait(mut self) -> Result<()> {
        self.join()
    }

    pub fn shutdown(mut self) -> Result<()> {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        self.join()
    }

    fn join(&mut self) -> Result<()> {
        match self.thread.take() {
            Some(t) => t
                .join()
                .map_err(|_| Error::Io(std::io::Error::other("server thread panicked")))?
                .map_err(Error::Io),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        let _ = self.join();
    }
}

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn evaluate(State(oracle): State<Arc<Oracle>>, body: Bytes) -> Response {
    let request = match decode_request(&body, 0) {
        Ok(r) => r,
        Err(e) => return json(StatusCode::BAD_REQUEST, encode_error(&e.to_string())),
    };
    let worker = Arc::clone(&oracle);
    let outcome = tokio::task::spawn_blocking(move || worker.evaluate(&request)).await;
    match outcome {
        Ok(Ok(response)) => match encode_response(&response) {
            Ok(text) => json(StatusCode::OK, text),
            Err(e) => json(StatusCode::INTERNAL_SERVER_ERROR, encode_error(&e.to_string())),
        },
        Ok(Err(e @ (OracleError::Protocol(_) | OracleError::Rejected(_)))) => {
            json(StatusCode::BAD_REQUEST, encode_error(&e.to_string()))
        }
        Ok(Err(e)) => json(StatusCode::SERVICE_UNAVAILABLE, encode_error(&e.to_string())),
        Err(e) => json(StatusCode::INTERNAL_SERVER_ERROR, encode_error(&e.to_string())),
    }
}

/// Binds `addr` and serves `backend` on a background thread.
///
/// Binding happens before returning, so a busy port is reported here.
pub fn spawn_server(backend: Arc<dyn Backend>, addr: SocketAddr, options: ServerOptions) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("cannot listen on {addr}: {e}")))
    })?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let oracle = Arc::new(Oracle::new(backend));
    let app = Router::new()
        .route(EVALUATE_PATH, post(evaluate))
        .with_state(Arc::clone(&oracle));
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let thread = std::thread::Builder::new()
        .name("oracle-server".into())
        .spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener)?;
                let stop = async move {
                    if options.stop_on_interrupt {
                        tokio::select! {
                            _ = stop_rx => {}
                            _ = tokio::signal::ctrl_c() => log::info!("interrupt received, shutting down"),
                        }
                    } else {
                        let _ = stop_rx.await;
                    }
                };
                axum::serve(listener, app).with_graceful_shutdown(stop).await
            })
        })?;
    log::info!("oracle service listening on http://{local_addr}{EVALUATE_PATH}");
    Ok(ServerHandle {
        local_addr,
        oracle,
        stop: Some(stop_tx),
        thread: Some(thread),
    })
}
