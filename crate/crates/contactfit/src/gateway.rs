//! Sampling contact descriptions from a chat-completion endpoint, with an
//! on-disk cache so runs can be recorded once and replayed offline.
//!
//! Cache layout: `<cache>/<key>/sample_<i>.txt`, one file per sample.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use base64::Engine;
use contactfit_core::parser::RawResponse;
use contactfit_core::Mode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

pub const TWO_PERSON_PROMPT: &str = include_str!("../prompts/two_person.txt");
pub const ONE_PERSON_PROMPT: &str = include_str!("../prompts/one_person.txt");

pub const ENDPOINT_VAR: &str = "LMM_ENDPOINT";
pub const API_KEY_VAR: &str = "LMM_API_KEY";
pub const MODEL_VAR: &str = "LMM_MODEL";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptTemplate {
    pub system_text: String,
    /// Passed through to the endpoint untouched.
    pub detail: String,
    pub temperature: f64,
    pub n_samples: usize,
}

impl PromptTemplate {
    /// Shipped prompt for the mode, 20 samples at temperature 0.7.
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            system_text: match mode {
                Mode::TwoPerson => TWO_PERSON_PROMPT,
                Mode::OnePerson => ONE_PERSON_PROMPT,
            }
            .to_string(),
            detail: "high".into(),
            temperature: 0.7,
            n_samples: 20,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(AppError::Validation(format!(
                "temperature must be finite and >= 0, got {}",
                self.temperature
            )));
        }
        if self.n_samples == 0 {
            return Err(AppError::Validation("n_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// Pixel rectangle: top-left corner and size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl std::str::FromStr for Rect {
    type Err = AppError;

    /// Parses `x,y,w,h`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<u32> = s
            .split(',')
            .map(|p| p.trim().parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AppError::Validation(format!("bad rectangle {s:?}, expected x,y,w,h")))?;
        match parts[..] {
            [x, y, w, h] => Ok(Rect { x, y, w, h }),
            _ => Err(AppError::Validation(format!("bad rectangle {s:?}, expected x,y,w,h"))),
        }
    }
}

/// Crops an encoded image. PNG stays lossless; JPEG is re-encoded at
/// quality 100.
pub fn crop_image(bytes: &[u8], rect: Rect) -> Result<Vec<u8>> {
    let format = image::guess_format(bytes).map_err(|e| AppError::Image(e.to_string()))?;
    let img = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| AppError::Image(e.to_string()))?;
    let fits = rect.w > 0
        && rect.h > 0
        && rect.x.checked_add(rect.w).is_some_and(|r| r <= img.width())
        && rect.y.checked_add(rect.h).is_some_and(|b| b <= img.height());
    if !fits {
        return Err(AppError::Validation(format!(
            "crop {},{},{},{} exceeds the {}x{} image",
            rect.x,
            rect.y,
            rect.w,
            rect.h,
            img.width(),
            img.height()
        )));
    }
    let cropped = img.crop_imm(rect.x, rect.y, rect.w, rect.h);
    let mut out = Cursor::new(Vec::new());
    match format {
        image::ImageFormat::Jpeg => {
            let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, 100);
            cropped
                .write_with_encoder(enc)
                .map_err(|e| AppError::Image(e.to_string()))?;
        }
        f => cropped
            .write_to(&mut out, f)
            .map_err(|e| AppError::Image(e.to_string()))?,
    }
    Ok(out.into_inner())
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuerySpec {
    /// Image as sent, i.e. already cropped.
    pub image_bytes: Vec<u8>,
    pub crop: Option<Rect>,
    pub template: PromptTemplate,
}

impl QuerySpec {
    /// Crops `image` if a rectangle is given.
    pub fn new(image: &[u8], crop: Option<Rect>, template: PromptTemplate) -> Result<Self> {
        template.validate()?;
        let image_bytes = match crop {
            Some(r) => crop_image(image, r)?,
            None => image.to_vec(),
        };
        Ok(Self {
            image_bytes,
            crop,
            template,
        })
    }

    /// SHA-256 over the sent image, prompt, detail flag, temperature and
    /// sample count.
    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        let mut field = |bytes: &[u8]| {
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(&self.image_bytes);
        field(self.template.system_text.as_bytes());
        field(self.template.detail.as_bytes());
        field(&self.template.temperature.to_le_bytes());
        field(&(self.template.n_samples as u64).to_le_bytes());
        hex::encode(h.finalize())
    }

    fn mime(&self) -> &'static str {
        match image::guess_format(&self.image_bytes) {
            Ok(image::ImageFormat::Jpeg) => "image/jpeg",
            Ok(image::ImageFormat::WebP) => "image/webp",
            Ok(image::ImageFormat::Gif) => "image/gif",
            _ => "image/png",
        }
    }

    /// Request body for one sample.
    pub fn request_body(&self, model: Option<&str>) -> Value {
        let data = base64::engine::general_purpose::STANDARD.encode(&self.image_bytes);
        let mut body = json!({
            "messages": [
                {"role": "system", "content": self.template.system_text},
                {"role": "user", "content": [{
                    "type": "image_url",
                    "image_url": {
                        "url": format!("data:{};base64,{data}", self.mime()),
                        "detail": self.template.detail,
                    }
                }]}
            ],
            "temperature": self.template.temperature,
            "n": 1,
        });
        if let Some(m) = model {
            body["model"] = json!(m);
        }
        body
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Read only from the cache; never touches the network.
    Replay,
    /// Fetch every sample and overwrite the cache entry.
    Record,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Gateway {
    pub cache_dir: PathBuf,
    pub mode: CacheMode,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout: Duration,
}

impl Gateway {
    pub fn new(cache_dir: impl Into<PathBuf>, mode: CacheMode) -> Self {
        Self {
            cache_dir: cache_dir.into(),
            mode,
            endpoint: None,
            api_key: None,
            model: None,
            retry: RetryPolicy::default(),
            max_in_flight: 4,
            timeout: Duration::from_secs(120),
        }
    }

    /// Picks up the endpoint, credential and model name from the environment.
    pub fn from_env(cache_dir: impl Into<PathBuf>, mode: CacheMode) -> Self {
        let mut g = Self::new(cache_dir, mode);
        g.endpoint = std::env::var(ENDPOINT_VAR).ok().filter(|s| !s.is_empty());
        g.api_key = std::env::var(API_KEY_VAR).ok().filter(|s| !s.is_empty());
        g.model = std::env::var(MODEL_VAR).ok().filter(|s| !s.is_empty());
        g
    }

    pub fn entry_dir(&self, key: &str) -> PathBuf {
        self.cache_dir.join(key)
    }

    /// Returns `n_samples` responses ordered by sample index.
    pub fn sample(&self, spec: &QuerySpec) -> Result<Vec<RawResponse>> {
        spec.template.validate()?;
        let key = spec.cache_key();
        match self.mode {
            CacheMode::Replay => read_entry(&self.entry_dir(&key), &key, spec.template.n_samples),
            CacheMode::Record => {
                let texts = self.fetch_all(spec)?;
                write_entry(&self.entry_dir(&key), &texts)?;
                Ok(into_responses(texts))
            }
        }
    }

    fn fetch_all(&self, spec: &QuerySpec) -> Result<Vec<String>> {
        let endpoint = self.endpoint.as_deref().ok_or_else(|| {
            AppError::Validation(format!("{ENDPOINT_VAR} is not set; cannot record responses"))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let body = spec.request_body(self.model.as_deref());
        let n = spec.template.n_samples;
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<String>>>> = Mutex::new((0..n).map(|_| None).collect());
        thread::scope(|s| {
            for _ in 0..self.max_in_flight.clamp(1, n) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= n {
                        break;
                    }
                    let r = self.fetch_one(&agent, endpoint, &body);
                    results.lock().expect("results lock")[i] = Some(r);
                });
            }
        });
        results
            .into_inner()
            .expect("results lock")
            .into_iter()
            .map(|r| r.expect("every sample attempted"))
            .collect()
    }

    fn fetch_one(&self, agent: &ureq::Agent, endpoint: &str, body: &Value) -> Result<String> {
        let attempts = self.retry.attempts.max(1);
        let mut wait = self.retry.initial_backoff;
        let mut last = String::new();
        for attempt in 1..=attempts {
            match self.post(agent, endpoint, body) {
                Ok(text) => return Ok(text),
                Err((retriable, detail)) => {
                    log::warn!("sample request attempt {attempt}/{attempts} failed: {detail}");
                    last = detail;
                    if !retriable {
                        return Err(AppError::Network { attempts: attempt, detail: last });
                    }
                }
            }
            if attempt < attempts {
                thread::sleep(wait);
                wait *= 2;
            }
        }
        Err(AppError::Network {
            attempts,
            detail: last,
        })
    }

    /// Error side: (worth retrying, description).
    fn post(
        &self,
        agent: &ureq::Agent,
        endpoint: &str,
        body: &Value,
    ) -> std::result::Result<String, (bool, String)> {
        let mut req = agent.post(endpoint);
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(body).map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| (true, e.to_string()))?;
        if !(200..300).contains(&status) {
            let retriable = status == 408 || status == 429 || status >= 500;
            return Err((retriable, format!("HTTP {status}: {}", truncate(&text, 200))));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (true, format!("bad JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (false, "response has no choices[0].message.content".to_string()))
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn into_responses(texts: Vec<String>) -> Vec<RawResponse> {
    texts
        .into_iter()
        .enumerate()
        .map(|(sample_index, text)| RawResponse { sample_index, text })
        .collect()
}

pub fn sample_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("sample_{i}.txt"))
}

/// Reads a cache entry that must hold exactly `n` samples.
pub fn read_entry(dir: &Path, key: &str, n: usize) -> Result<Vec<RawResponse>> {
    if !dir.is_dir() {
        return Err(AppError::CacheMiss {
            key: key.into(),
            detail: "entry absent".into(),
        });
    }
    let mut texts = Vec::with_capacity(n);
    for i in 0..n {
        let p = sample_path(dir, i);
        match fs::read_to_string(&p) {
            Ok(t) => texts.push(t),
            Err(_) => {
                return Err(AppError::CacheMiss {
                    key: key.into(),
                    detail: format!("sample {i} missing"),
                })
            }
        }
    }
    if sample_path(dir, n).exists() {
        return Err(AppError::CacheMiss {
            key: key.into(),
            detail: format!("entry holds more than {n} samples"),
        });
    }
    Ok(into_responses(texts))
}

/// Writes all samples to a staging directory and swaps it into place.
pub fn write_entry(dir: &Path, texts: &[String]) -> Result<()> {
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| AppError::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| AppError::io(&staging, e))?;
    for (i, t) in texts.iter().enumerate() {
        let p = sample_path(&staging, i);
        fs::write(&p, t).map_err(|e| AppError::io(&p, e))?;
    }
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| AppError::io(dir, e))
}

/// Reads a JSON list of responses, or a directory of `sample_<i>.txt`
/// files (every consecutive index from 0).
pub fn load_responses(path: &Path) -> Result<Vec<RawResponse>> {
    if path.is_dir() {
        let mut texts = Vec::new();
        while let Ok(t) = fs::read_to_string(sample_path(path, texts.len())) {
            texts.push(t);
        }
        if texts.is_empty() {
            return Err(AppError::Validation(format!(
                "{} holds no sample_0.txt",
                path.display()
            )));
        }
        return Ok(into_responses(texts));
    }
    let mut list: Vec<RawResponse> = crate::io::read_json(path)?;
    list.sort_by_key(|r| r.sample_index);
    Ok(list)
}
