//! Document fetching over local paths and plain HTTP, with a size cap and
//! a shared byte counter feeding the `smartcube_bytes_read_total` metric.

use std::io::Read;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};

/// Default fetch size cap: 64 MiB.
pub const DEFAULT_FETCH_LIMIT: u64 = 64 * 1024 * 1024;

/// HTTP fetches follow at most this many redirects.
pub const MAX_REDIRECTS: u32 = 3;

pub fn is_url(locator: &str) -> bool {
    locator.starts_with("http://") || locator.starts_with("https://")
}

/// Resolve `rel` against the document locator `base` (a file path or URL).
/// Absolute URLs and absolute paths pass through unchanged.
pub fn join_locator(base: &str, rel: &str) -> String {
    if is_url(rel) || rel.starts_with('/') {
        return rel.to_string();
    }
    if is_url(base) {
        let scheme_end = base.find("://").map(|i| i + 3).unwrap_or(0);
        let path_start = base[scheme_end..]
            .find('/')
            .map(|i| scheme_end + i)
            .unwrap_or(base.len());
        let (host, path) = base.split_at(path_start);
        // Drop the document segment, append rel, then normalize . and ..
        // (never popping above the root).
        let dir = match path.rfind('/') {
            Some(i) => &path[..i],
            None => "",
        };
        let mut segments: Vec<&str> = dir.split('/').filter(|s| !s.is_empty()).collect();
        for seg in rel.split('/') {
            match seg {
                "" | "." => {}
                ".." => {
                    segments.pop();
                }
                s => segments.push(s),
            }
        }
        format!("{host}/{}", segments.join("/"))
    } else {
        let parent = Path::new(base).parent().unwrap_or_else(|| Path::new(""));
        parent.join(rel).to_string_lossy().into_owned()
    }
}

/// Fetches documents from local paths or http(s) URLs.
///
/// Clones share the HTTP agent and the byte counter, so one fetcher can be
/// handed to every worker of an executor run and the counter still reflects
/// the run's total payload bytes.
#[derive(Clone)]
pub struct Fetcher {
    agent: ureq::Agent,
    limit: u64,
    bytes_read: Arc<AtomicU64>,
}

impl Default for Fetcher {
    fn default() -> Self {
        Self::new()
    }
}

impl Fetcher {
    pub fn new() -> Self {
        Self::with_limit(DEFAULT_FETCH_LIMIT)
    }

    pub fn with_limit(limit: u64) -> Self {
        Fetcher {
            agent: ureq::AgentBuilder::new()
                // ureq's limit counts the request about to be issued, not
                // hops already taken: n rejects the nth redirect, so n + 1
                // follows exactly n.
                .redirects(MAX_REDIRECTS + 1)
                .build(),
            limit,
            bytes_read: Arc::new(AtomicU64::new(0)),
        }
    }

    /// Total payload bytes fetched so far across all clones.
    pub fn bytes_read(&self) -> u64 {
        self.bytes_read.load(Ordering::Relaxed)
    }

    pub fn bytes_counter(&self) -> Arc<AtomicU64> {
        Arc::clone(&self.bytes_read)
    }

    /// Fetch a document's bytes. Local and remote fetches of the same
    /// content are byte-identical.
    pub fn fetch(&self, href: &str) -> Result<Vec<u8>> {
        let data = if is_url(href) {
            self.fetch_http(href)?
        } else {
            self.fetch_local(href)?
        };
        self.bytes_read.fetch_add(data.len() as u64, Ordering::Relaxed);
        Ok(data)
    }

    fn fetch_local(&self, href: &str) -> Result<Vec<u8>> {
        let meta = std::fs::metadata(href).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::NotFound {
                href: href.to_string(),
            },
            _ => Error::Fetch {
                href: href.to_string(),
                reason: e.to_string(),
            },
        })?;
        if meta.len() > self.limit {
            return Err(Error::SizeLimit {
                href: href.to_string(),
                limit: self.limit,
            });
        }
        std::fs::read(href).map_err(|e| Error::Fetch {
            href: href.to_string(),
            reason: e.to_string(),
        })
    }

    fn fetch_http(&self, href: &str) -> Result<Vec<u8>> {
        let response = self.agent.get(href).call().map_err(|e| match e {
            ureq::Error::Status(404, _) => Error::NotFound {
                href: href.to_string(),
            },
            other => Error::Fetch {
                href: href.to_string(),
                reason: other.to_string(),
            },
        })?;
        let mut buf = Vec::new();
        response
            .into_reader()
            .take(self.limit + 1)
            .read_to_end(&mut buf)
            .map_err(|e| Error::Fetch {
                href: href.to_string(),
                reason: e.to_string(),
            })?;
        if buf.len() as u64 > self.limit {
            return Err(Error::SizeLimit {
                href: href.to_string(),
                limit: self.limit,
            });
        }
        Ok(buf)
    }
}
