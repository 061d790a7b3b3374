//! Network-backed clients: an OpenAI-compatible multimodal chat endpoint and
//! the US Census geocoder.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use base64::Engine;
use geoshield::annotation::{MllmRequest, MultimodalClient};
use geoshield::evaluation::{Geocoder, LocationCodes, QueryRequest, TargetModel};
use geoshield::{Error, ImageBuffer, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Endpoint settings; the credential itself is read from `api_key_env`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    pub api_key_env: Option<String>,
    pub timeout_secs: u64,
    /// Minimum spacing between requests.
    pub min_interval_ms: u64,
    /// Downscale uploads so the longer side does not exceed this.
    pub max_image_side: Option<usize>,
    pub temperature: Option<f64>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            model: String::new(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            timeout_secs: 120,
            min_interval_ms: 0,
            max_image_side: None,
            temperature: None,
        }
    }
}

impl EndpointConfig {
    pub fn load(path: &std::path::Path) -> anyhow::Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub struct ChatClient {
    cfg: EndpointConfig,
    key: Option<String>,
    agent: ureq::Agent,
    last: Mutex<Option<Instant>>,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> anyhow::Result<Self> {
        anyhow::ensure!(!cfg.url.is_empty(), "endpoint url is empty");
        anyhow::ensure!(!cfg.model.is_empty(), "endpoint model name is empty");
        let key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| anyhow::anyhow!("credential variable {var} is not set"))?),
            None => None,
        };
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(cfg.timeout_secs)).build();
        Ok(Self { cfg, key, agent, last: Mutex::new(None) })
    }

    fn throttle(&self) {
        let mut last = self.last.lock().expect("throttle poisoned");
        let gap = Duration::from_millis(self.cfg.min_interval_ms);
        if let Some(t) = *last {
            let since = t.elapsed();
            if since < gap {
                std::thread::sleep(gap - since);
            }
        }
        *last = Some(Instant::now());
    }

    fn data_url(&self, image: &ImageBuffer) -> Result<String> {
        let img = match self.cfg.max_image_side {
            Some(cap) if image.width().max(image.height()) > cap => {
                let s = cap as f64 / image.width().max(image.height()) as f64;
                let w = ((image.width() as f64 * s).round() as usize).max(1);
                let h = ((image.height() as f64 * s).round() as usize).max(1);
                image.resize_bilinear(w, h)?
            }
            _ => image.clone(),
        };
        let png = img.png_bytes()?;
        Ok(format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(png)))
    }

    pub fn chat(&self, prompt: &str, image: &ImageBuffer) -> Result<String> {
        let mut body = json!({
            "model": self.cfg.model,
            "messages": [{
                "role": "user",
                "content": [
                    {"type": "text", "text": prompt},
                    {"type": "image_url", "image_url": {"url": self.data_url(image)?}}
                ]
            }]
        });
        if let Some(t) = self.cfg.temperature {
            body["temperature"] = json!(t);
        }
        self.throttle();
        let mut req = self.agent.post(&self.cfg.url);
        if let Some(k) = &self.key {
            req = req.set("Authorization", &format!("Bearer {k}"));
        }
        let resp: Value = req
            .send_json(body)
            .map_err(|e| Error::Client(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Client("response has no message content".into()))
    }
}

impl MultimodalClient for ChatClient {
    fn complete(&self, r: &MllmRequest<'_>) -> Result<String> {
        self.chat(r.prompt, r.image)
    }
}

impl TargetModel for ChatClient {
    fn name(&self) -> &str {
        &self.cfg.model
    }

    fn query(&self, r: &QueryRequest<'_>) -> Result<String> {
        self.chat(r.prompt, r.image)
    }
}

const CENSUS_BASE: &str = "https://geocoding.geo.census.gov/geocoder/geographies";

/// Resolves addresses (or `lat, lon` pairs) to state, CBSA, tract and block
/// identifiers.
pub struct CensusGeocoder {
    agent: ureq::Agent,
}

impl CensusGeocoder {
    pub fn new(timeout: Duration) -> Self {
        Self { agent: ureq::AgentBuilder::new().timeout(timeout).build() }
    }
}

fn parse_coordinates(text: &str) -> Option<(f64, f64)> {
    let mut parts = text.split(',').map(str::trim);
    let lat = parts.next()?.parse::<f64>().ok()?;
    let lon = parts.next()?.parse::<f64>().ok()?;
    if parts.next().is_some() || !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return None;
    }
    Some((lat, lon))
}

fn first_layer<'a>(geos: &'a Value, needle: &str) -> Option<&'a Value> {
    geos.as_object()?
        .iter()
        .filter(|(k, _)| k.contains(needle))
        .find_map(|(_, v)| v.as_array().and_then(|a| a.first()))
}

pub(crate) fn codes_from_geographies(geos: &Value) -> Option<LocationCodes> {
    let geoid = |needle: &str| first_layer(geos, needle).and_then(|v| v.get("GEOID")).and_then(Value::as_str).map(str::to_string);
    let region = first_layer(geos, "States").and_then(|v| v.get("STATE")).and_then(Value::as_str).map(str::to_string);
    let metro = first_layer(geos, "Metropolitan Statistical Areas")
        .or_else(|| first_layer(geos, "Micropolitan Statistical Areas"))
        .and_then(|v| v.get("CBSA").or_else(|| v.get("GEOID")))
        .and_then(Value::as_str)
        .map(str::to_string);
    let codes = LocationCodes { region, metro, tract: geoid("Census Tracts"), block: geoid("Census Blocks") };
    (codes != LocationCodes::default()).then_some(codes)
}

impl Geocoder for CensusGeocoder {
    fn resolve(&self, text: &str) -> Result<Option<LocationCodes>> {
        let req = match parse_coordinates(text) {
            Some((lat, lon)) => self
                .agent
                .get(&format!("{CENSUS_BASE}/coordinates"))
                .query("x", &lon.to_string())
                .query("y", &lat.to_string()),
            None => self.agent.get(&format!("{CENSUS_BASE}/onelineaddress")).query("address", text),
        };
        let resp: Value = req
            .query("benchmark", "Public_AR_Current")
            .query("vintage", "Current_Current")
            .query("format", "json")
            .call()
            .map_err(|e| Error::Client(e.to_string()))?
            .into_json()
            .map_err(|e| Error::Client(e.to_string()))?;
        let geos = resp
            .pointer("/result/addressMatches/0/geographies")
            .or_else(|| resp.pointer("/result/geographies"));
        Ok(geos.and_then(codes_from_geographies))
    }
}
