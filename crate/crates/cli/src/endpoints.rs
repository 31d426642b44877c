//! `--endpoints` parsing.
//!
//! Accepted forms:
//!
//! - `mock`: every role served in-process by the procedural mocks;
//! - `http://host:port`: every role forwarded to one service;
//! - `role=target,...`: per-role targets (`mock` or a URL), unlisted roles
//!   use the mocks.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use tileworld::genproto::client::RemoteClient;
use tileworld::genproto::mock::MockConfig;
use tileworld::genproto::{Endpoints, Role};

use crate::error::CliError;

const REMOTE_TIMEOUT: Duration = Duration::from_secs(600);
const REMOTE_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Mock,
    Remote(String),
}

fn target(s: &str) -> Result<Target, CliError> {
    match s.trim() {
        "mock" => Ok(Target::Mock),
        url if url.starts_with("http://") || url.starts_with("https://") => {
            Ok(Target::Remote(url.to_string()))
        }
        other => Err(CliError::config(format!(
            "endpoint target must be `mock` or an http(s) URL, got `{other}`"
        ))),
    }
}

pub fn parse(raw: &str) -> Result<BTreeMap<Role, Target>, CliError> {
    let raw = raw.trim();
    if !raw.contains('=') {
        let t = target(raw)?;
        return Ok(Role::ALL.into_iter().map(|r| (r, t.clone())).collect());
    }
    let mut out: BTreeMap<Role, Target> =
        Role::ALL.into_iter().map(|r| (r, Target::Mock)).collect();
    for pair in raw.split(',').filter(|p| !p.trim().is_empty()) {
        let (role, t) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("expected role=target, got `{pair}`")))?;
        let role = Role::parse(role.trim()).ok_or_else(|| {
            let known: Vec<_> = Role::ALL.iter().map(|r| r.as_str()).collect();
            CliError::config(format!(
                "unknown role `{}` (known: {})",
                role.trim(),
                known.join(", ")
            ))
        })?;
        out.insert(role, target(t)?);
    }
    Ok(out)
}

/// Builds the endpoint set, sharing one client per distinct URL.
pub fn resolve(targets: &BTreeMap<Role, Target>, mock: MockConfig) -> Endpoints {
    let mut ep = Endpoints::mock(mock);
    let mut clients: BTreeMap<&str, Arc<RemoteClient>> = BTreeMap::new();
    for (role, t) in targets {
        let Target::Remote(url) = t else { continue };
        let c = clients
            .entry(url.as_str())
            .or_insert_with(|| Arc::new(RemoteClient::new(url, REMOTE_TIMEOUT, REMOTE_RETRIES)))
            .clone();
        match role {
            Role::PromptExpander => ep.expander = c,
            Role::Inpainter2d => ep.inpainter = c,
            Role::ImageTo3d => ep.image_to_3d = c,
            Role::LatentDenoiser => ep.denoiser = c,
            Role::BackgroundRemoval => ep.background = c,
            Role::ImageDistance => ep.distance = c,
        }
    }
    ep
}
