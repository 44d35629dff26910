//! HTTP/JSON routes over an [`Engine`].

use std::future::Future;
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::NaiveDate;
use netcase_core::case::{Case, CaseStatus, Engine};
use netcase_core::ingest::{FileEntry, ImportConfig, ImportRecord, ImportStatus};
use netcase_core::store::CleanupScope;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::error::ServiceError;
use crate::ops::{self, *};

type ApiResult<T> = Result<T, ServiceError>;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub bind: IpAddr,
    pub port: u16,
    pub data_root: PathBuf,
}

pub struct AppState {
    engine: Arc<Engine>,
    imports: Mutex<Vec<JoinHandle<()>>>,
}

impl AppState {
    pub fn new(engine: Arc<Engine>) -> Arc<Self> {
        Arc::new(AppState {
            engine,
            imports: Mutex::new(Vec::new()),
        })
    }

    fn track(&self, handle: JoinHandle<()>) {
        let mut imports = self.imports.lock().unwrap_or_else(|e| e.into_inner());
        imports.retain(|h| !h.is_finished());
        imports.push(handle);
    }

    /// Blocks until every background import has finished.
    pub fn join_imports(&self) {
        let handles = std::mem::take(&mut *self.imports.lock().unwrap_or_else(|e| e.into_inner()));
        for h in handles {
            if h.join().is_err() {
                log::error!("import thread panicked");
            }
        }
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> ApiResult<T> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

fn body<T>(r: Result<Json<T>, JsonRejection>) -> ApiResult<T> {
    r.map(|Json(v)| v)
        .map_err(|e| ServiceError::InvalidRequest(e.body_text()))
}

fn params<T>(r: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    r.map(|Query(v)| v)
        .map_err(|e| ServiceError::InvalidRequest(e.body_text()))
}

/// An optional JSON body; empty means `T::default()`.
fn opt_body<T: DeserializeOwned + Default>(bytes: &[u8]) -> ApiResult<T> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ServiceError::InvalidRequest(e.to_string()))
}

fn case_of(st: &AppState, id: &str) -> ApiResult<Arc<Case>> {
    Ok(st.engine.case(id)?)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/cases", post(create_case).get(list_cases))
        .route("/cases/restore", post(restore_case))
        .route("/cases/:id", axum::routing::delete(destroy_case))
        .route(
            "/cases/:id/files",
            post(upload_file)
                .get(list_files)
                .delete(delete_file)
                .layer(DefaultBodyLimit::disable()),
        )
        .route("/cases/:id/files/move", post(move_file))
        .route("/cases/:id/configs", post(save_config))
        .route("/cases/:id/imports", post(submit_import).get(list_imports))
        .route("/cases/:id/imports/:iid", get(get_import))
        .route("/cases/:id/watches/:wid", put(put_watch).delete(delete_watch))
        .route("/cases/:id/watches/:wid/tick", post(tick_watch))
        .route("/cases/:id/query", post(query))
        .route("/cases/:id/aggregate", post(aggregate))
        .route("/cases/:id/detect/portscan", get(portscan))
        .route("/cases/:id/detect/histogram", get(histogram))
        .route("/cases/:id/status", get(status))
        .route("/cases/:id/cleanup", post(cleanup))
        .route("/cases/:id/backup", post(backup))
        .route("/cases/:id/start", post(start))
        .route("/cases/:id/stop", post(stop))
        .with_state(state)
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn create_case(
    State(st): State<Arc<AppState>>,
    req: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<CaseStatus>)> {
    let req = body(req)?;
    let s = blocking(move || Ok(st.engine.create_case(&req.case_id)?.status()?)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

async fn list_cases(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<CaseStatus>>> {
    Ok(Json(blocking(move || Ok(st.engine.status_all()?)).await?))
}

async fn destroy_case(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    blocking(move || Ok(st.engine.destroy_case(&id)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn restore_case(
    State(st): State<Arc<AppState>>,
    req: Result<Json<RestoreRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<CaseStatus>)> {
    let req = body(req)?;
    let s = blocking(move || Ok(st.engine.restore_case(&req.archive, &req.case_id)?.status()?)).await?;
    Ok((StatusCode::CREATED, Json(s)))
}

#[derive(Debug, Deserialize)]
struct PathParam {
    path: String,
}

async fn upload_file(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    p: Result<Query<PathParam>, QueryRejection>,
    bytes: Bytes,
) -> ApiResult<(StatusCode, Json<FileEntry>)> {
    let p = params(p)?;
    let entry = blocking(move || {
        let case = case_of(&st, &id)?;
        case.data_root().upload(&p.path, &bytes)?;
        Ok(FileEntry {
            path: p.path,
            kind: netcase_core::ingest::FileKind::File,
            size: bytes.len() as u64,
        })
    })
    .await?;
    Ok((StatusCode::CREATED, Json(entry)))
}

async fn list_files(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<FileEntry>>> {
    let files = blocking(move || Ok(case_of(&st, &id)?.data_root().list()?)).await?;
    Ok(Json(files))
}

async fn delete_file(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    p: Result<Query<PathParam>, QueryRejection>,
) -> ApiResult<StatusCode> {
    let p = params(p)?;
    blocking(move || Ok(case_of(&st, &id)?.data_root().delete(&p.path)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
struct MoveRequest {
    from: String,
    to: String,
}

async fn move_file(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<MoveRequest>, JsonRejection>,
) -> ApiResult<StatusCode> {
    let req = body(req)?;
    blocking(move || {
        case_of(&st, &id)?.data_root().rename(&req.from, &req.to)?;
        Ok(())
    })
    .await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn save_config(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<ImportConfig>, JsonRejection>,
) -> ApiResult<Json<ImportConfig>> {
    let config = body(req)?;
    let saved = config.clone();
    blocking(move || Ok(case_of(&st, &id)?.save_config(config)?)).await?;
    Ok(Json(saved))
}

#[derive(Debug, Default, Deserialize)]
struct WaitParam {
    #[serde(default)]
    wait: bool,
}

#[derive(Debug, Serialize)]
struct Submitted {
    import_id: String,
    status: ImportStatus,
}

async fn submit_import(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    w: Result<Query<WaitParam>, QueryRejection>,
    req: Result<Json<ImportRequest>, JsonRejection>,
) -> ApiResult<Response> {
    let wait = params(w)?.wait;
    let req = body(req)?;
    let state = st.clone();
    let (case, pending) = blocking(move || {
        let case = case_of(&state, &id)?;
        let inputs = ops::resolve_inputs(&case, &req.inputs)?;
        let pending = case.submit_import(&inputs, req.config)?;
        Ok((case, pending))
    })
    .await?;
    if wait {
        let rec: ImportRecord = blocking(move || Ok(case.run_import(pending))).await?;
        return Ok(Json(rec).into_response());
    }
    let import_id = pending.import_id.clone();
    let handle = std::thread::Builder::new()
        .name(format!("import-{import_id}"))
        .spawn(move || {
            let rec = case.run_import(pending);
            log::info!("case {}: import {} finished: {:?}", case.id(), rec.import_id, rec.status);
        })?;
    st.track(handle);
    Ok((
        StatusCode::ACCEPTED,
        Json(Submitted {
            import_id,
            status: ImportStatus::Running,
        }),
    )
        .into_response())
}

async fn list_imports(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Vec<ImportRecord>>> {
    Ok(Json(blocking(move || Ok(case_of(&st, &id)?.history()?)).await?))
}

async fn get_import(
    State(st): State<Arc<AppState>>,
    Path((id, iid)): Path<(String, String)>,
) -> ApiResult<Json<ImportRecord>> {
    let rec = blocking(move || {
        case_of(&st, &id)?
            .import_record(&iid)?
            .ok_or(ServiceError::UnknownImport(iid))
    })
    .await?;
    Ok(Json(rec))
}

async fn put_watch(
    State(st): State<Arc<AppState>>,
    Path((id, wid)): Path<(String, String)>,
    req: Result<Json<WatchRequest>, JsonRejection>,
) -> ApiResult<Json<WatchResponse>> {
    let req = body(req)?;
    let r = blocking(move || {
        let changed = case_of(&st, &id)?.put_watch(req.into_config(&wid))?;
        Ok(WatchResponse { watch_id: wid, changed })
    })
    .await?;
    Ok(Json(r))
}

async fn delete_watch(
    State(st): State<Arc<AppState>>,
    Path((id, wid)): Path<(String, String)>,
) -> ApiResult<StatusCode> {
    blocking(move || Ok(case_of(&st, &id)?.remove_watch(&wid)?)).await?;
    Ok(StatusCode::NO_CONTENT)
}

async fn tick_watch(
    State(st): State<Arc<AppState>>,
    Path((id, wid)): Path<(String, String)>,
) -> ApiResult<Json<Vec<ImportRecord>>> {
    Ok(Json(blocking(move || Ok(case_of(&st, &id)?.tick_watch(&wid)?)).await?))
}

async fn query(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<QueryRequest>, JsonRejection>,
) -> ApiResult<Json<QueryResponse>> {
    let req = body(req)?;
    Ok(Json(blocking(move || Ok(ops::query(&*case_of(&st, &id)?, &req)?)).await?))
}

async fn aggregate(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    req: Result<Json<AggregateRequest>, JsonRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let req = body(req)?;
    Ok(Json(blocking(move || Ok(ops::aggregate(&*case_of(&st, &id)?, &req)?)).await?))
}

async fn portscan(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    p: Result<Query<PortScanParams>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let p = params(p)?;
    Ok(Json(blocking(move || Ok(ops::portscan(&*case_of(&st, &id)?, &p)?)).await?))
}

async fn histogram(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    p: Result<Query<HistogramParams>, QueryRejection>,
) -> ApiResult<Json<netcase_core::detect::IntervalHistogram>> {
    let p = params(p)?;
    Ok(Json(blocking(move || Ok(ops::histogram(&*case_of(&st, &id)?, &p)?)).await?))
}

async fn status(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<CaseStatus>> {
    Ok(Json(blocking(move || Ok(st.engine.status(&id)?)).await?))
}

#[derive(Debug, Default, Deserialize)]
struct CleanupRequest {
    day: Option<NaiveDate>,
}

#[derive(Debug, Serialize)]
struct CleanupResponse {
    removed: u64,
}

async fn cleanup(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    raw: Bytes,
) -> ApiResult<Json<CleanupResponse>> {
    let req: CleanupRequest = opt_body(&raw)?;
    let scope = req.day.map_or(CleanupScope::All, CleanupScope::ByDay);
    let removed = blocking(move || Ok(case_of(&st, &id)?.cleanup(scope)?)).await?;
    Ok(Json(CleanupResponse { removed }))
}

async fn backup(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    raw: Bytes,
) -> ApiResult<Json<BackupResponse>> {
    let req: BackupRequest = opt_body(&raw)?;
    let r = blocking(move || {
        let case = case_of(&st, &id)?;
        Ok(ops::backup(&st.engine, &case, req.out)?)
    })
    .await?;
    Ok(Json(r))
}

async fn start(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<CaseStatus>> {
    let s = blocking(move || {
        let case = case_of(&st, &id)?;
        case.start()?;
        Ok(case.status()?)
    })
    .await?;
    Ok(Json(s))
}

async fn stop(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<CaseStatus>> {
    let s = blocking(move || {
        let case = case_of(&st, &id)?;
        case.stop()?;
        Ok(case.status()?)
    })
    .await?;
    Ok(Json(s))
}

/// A bound listener with its state, not yet serving.
pub struct Server {
    listener: TcpListener,
    state: Arc<AppState>,
}

impl Server {
    pub async fn bind(config: &ServeConfig) -> Result<Server, ServiceError> {
        let addr = SocketAddr::new(config.bind, config.port);
        let listener = TcpListener::bind(addr)
            .await
            .map_err(|source| ServiceError::BindFailure { addr, source })?;
        let dr = config.data_root.clone();
        let engine = blocking(move || {
            let engine = Engine::open(&dr)?;
            for id in engine.list()? {
                if let Err(e) = engine.case(&id) {
                    log::warn!("case {id} did not open: {e}");
                }
            }
            Ok(engine)
        })
        .await?;
        Ok(Server {
            listener,
            state: AppState::new(Arc::new(engine)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves until `shutdown` resolves, then waits for in-flight imports.
    pub async fn run(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        let (stop_tx, stop_rx) = tokio::sync::watch::channel(false);
        let watchdog = tokio::spawn(watchdog(self.state.engine.clone(), stop_rx));
        let app = router(self.state.clone());
        let served = axum::serve(self.listener, app)
            .with_graceful_shutdown(shutdown)
            .await;
        let _ = stop_tx.send(true);
        let _ = watchdog.await;
        let state = self.state;
        blocking(move || {
            state.join_imports();
            Ok(())
        })
        .await?;
        served.map_err(ServiceError::Io)
    }
}

async fn watchdog(engine: Arc<Engine>, mut stop: tokio::sync::watch::Receiver<bool>) {
    let mut tick = tokio::time::interval(Duration::from_secs(1));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    loop {
        tokio::select! {
            _ = tick.tick() => {}
            _ = stop.changed() => return,
        }
        let engine = engine.clone();
        let ran = tokio::task::spawn_blocking(move || {
            for case in engine.open_cases() {
                for rec in case.tick_due_watches() {
                    log::info!("case {}: watch import {}: {:?}", case.id(), rec.import_id, rec.status);
                }
            }
        })
        .await;
        if let Err(e) = ran {
            log::error!("watchdog tick failed: {e}");
        }
    }
}

/// Binds and serves until Ctrl-C.
pub async fn serve(config: ServeConfig) -> Result<(), ServiceError> {
    let server = Server::bind(&config).await?;
    log::info!("listening on http://{}", server.local_addr()?);
    server
        .run(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await
}
