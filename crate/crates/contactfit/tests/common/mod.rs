#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use contactfit::assets::Bundle;
use contactfit::io::to_json;
use contactfit_core::parser::{parse_response, RawResponse};
use contactfit_core::Mode;
use sha2::{Digest, Sha256};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub struct GoldenCase {
    pub name: String,
    pub mode: Mode,
    pub expected: String,
    pub actual: String,
}

/// Parses every corpus response and renders the canonical set next to the
/// checked-in expectation.
pub fn parser_corpus(bundle: &Bundle) -> Vec<GoldenCase> {
    let mut cases = Vec::new();
    for (dir, mode) in [("two_person", Mode::TwoPerson), ("one_person", Mode::OnePerson)] {
        let root = fixtures().join("parser").join(dir);
        let mut names: Vec<PathBuf> = fs::read_dir(&root)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        names.sort();
        for txt in names {
            let stem = txt.file_stem().unwrap().to_string_lossy().into_owned();
            let index: usize = stem[..2].parse().unwrap();
            let text = fs::read_to_string(&txt).unwrap();
            let expected = fs::read_to_string(txt.with_extension("json")).unwrap();
            let set = parse_response(&RawResponse { sample_index: index, text }, &bundle.registry, mode);
            cases.push(GoldenCase {
                name: format!("{dir}/{stem}"),
                mode,
                expected,
                actual: to_json(&set.canonical(&bundle.registry)),
            });
        }
    }
    cases
}

/// Relative path -> sha256 of every file under `dir`.
pub fn tree_hashes(dir: &Path) -> BTreeMap<String, String> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                out.insert(rel, hex::encode(Sha256::digest(fs::read(&p).unwrap())));
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Minimal HTTP endpoint: answers each request with the next scripted
/// (status, body) pair, repeating the last one, and counts connections.
pub struct StubServer {
    pub url: String,
    pub connections: std::sync::Arc<std::sync::atomic::AtomicUsize>,
    pub requests: std::sync::Arc<std::sync::Mutex<Vec<String>>>,
}

pub fn chat_body(content: &str) -> String {
    serde_json::json!({ "choices": [{ "message": { "role": "assistant", "content": content } }] }).to_string()
}

impl StubServer {
    pub fn start(script: Vec<(u16, String)>) -> Self {
        use std::io::{BufRead, BufReader, Read, Write};
        use std::sync::atomic::{AtomicUsize, Ordering};
        use std::sync::{Arc, Mutex};

        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let connections = Arc::new(AtomicUsize::new(0));
        let requests = Arc::new(Mutex::new(Vec::new()));
        let served = Arc::new(AtomicUsize::new(0));
        let script = Arc::new(script);
        let (c, r) = (connections.clone(), requests.clone());
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                c.fetch_add(1, Ordering::SeqCst);
                let (r, served, script) = (r.clone(), served.clone(), script.clone());
                std::thread::spawn(move || {
                    let mut reader = BufReader::new(stream.try_clone().unwrap());
                    let mut out = stream;
                    loop {
                        let mut line = String::new();
                        if reader.read_line(&mut line).unwrap_or(0) == 0 {
                            return;
                        }
                        let mut len = 0usize;
                        loop {
                            let mut h = String::new();
                            if reader.read_line(&mut h).unwrap_or(0) == 0 {
                                return;
                            }
                            if h == "\r\n" {
                                break;
                            }
                            if let Some((k, v)) = h.split_once(':') {
                                if k.eq_ignore_ascii_case("content-length") {
                                    len = v.trim().parse().unwrap();
                                }
                            }
                        }
                        let mut body = vec![0u8; len];
                        reader.read_exact(&mut body).unwrap();
                        r.lock().unwrap().push(String::from_utf8(body).unwrap());
                        let i = served.fetch_add(1, Ordering::SeqCst);
                        let (status, text) = &script[i.min(script.len() - 1)];
                        let reply = format!(
                            "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{text}",
                            text.len()
                        );
                        if out.write_all(reply.as_bytes()).is_err() {
                            return;
                        }
                    }
                });
            }
        });
        Self { url, connections, requests }
    }

    pub fn connection_count(&self) -> usize {
        self.connections.load(std::sync::atomic::Ordering::SeqCst)
    }
}

pub fn tiny_png() -> Vec<u8> {
    let img = image::RgbImage::from_fn(32, 24, |x, y| image::Rgb([(x * 7) as u8, (y * 9) as u8, 40]));
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
    buf.into_inner()
}
