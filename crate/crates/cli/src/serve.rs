use std::io::Write as _;
use std::time::Duration;

use disco_core::profiles::quantile_sorted;
use disco_core::Endpoint;
use disco_gateway::mock::{MockScript, MockUpstream};
use disco_gateway::{AppState, GatewayConfig};
use tokio::net::TcpListener;

use crate::error::{require_file, CliError, Result};
use crate::{Globals, ServeArgs};

pub fn run(g: &Globals, a: &ServeArgs) -> Result<()> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("serve needs --config".into()))?;
    require_file(path)?;
    let mut cfg = GatewayConfig::load(path).map_err(CliError::from)?;
    if let Some(l) = &a.listen {
        cfg.listen = l.clone();
    }
    let _ = tracing_subscriber::fmt().with_writer(std::io::stderr).try_init();
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Runtime(format!("cannot start runtime: {e}")))?;
    rt.block_on(serve(cfg, a.mock))
}

/// Local upstreams that follow the configured device line and the median
/// server TTFT.
async fn start_mocks(cfg: &mut GatewayConfig) -> Result<()> {
    let mut samples = cfg.server.ttft_samples.clone();
    samples.sort_by(f64::total_cmp);
    let device = MockScript::linear(
        cfg.device.k,
        cfg.device.c,
        Duration::from_secs_f64(1.0 / cfg.device.decode_rate),
    );
    let server = MockScript::fixed(
        Duration::from_secs_f64(quantile_sorted(&samples, 0.5)),
        Duration::from_secs_f64(cfg.server.tbt_s),
    );
    for (role, script) in [(Endpoint::Device, device), (Endpoint::Server, server)] {
        let mock = MockUpstream::start(script)
            .await
            .map_err(|e| CliError::Runtime(format!("cannot start mock {role} upstream: {e}")))?;
        println!("mock {role} upstream on {}", mock.base_url());
        for u in cfg.upstreams.iter_mut().filter(|u| u.role == role) {
            u.base_url = mock.base_url();
        }
    }
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = tokio::signal::ctrl_c();
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        match signal(SignalKind::terminate()) {
            Ok(mut term) => {
                tokio::select! {
                    _ = ctrl_c => {}
                    _ = term.recv() => {}
                }
            }
            Err(_) => {
                let _ = ctrl_c.await;
            }
        }
    }
    #[cfg(not(unix))]
    {
        let _ = ctrl_c.await;
    }
}

async fn serve(mut cfg: GatewayConfig, mock: bool) -> Result<()> {
    cfg.validate().map_err(CliError::from)?;
    if mock {
        start_mocks(&mut cfg).await?;
    }
    let listener = TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| CliError::Runtime(format!("cannot bind {}: {e}", cfg.listen)))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let app = AppState::new(cfg).map_err(CliError::from)?;
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();
    disco_gateway::serve(listener, app.clone(), shutdown_signal())
        .await
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    println!("drained, {} sessions active", app.active_sessions());
    Ok(())
}
