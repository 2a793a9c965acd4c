use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::tokenizer::{encode_png_bytes, ImageGrid};

/// Judge instruction; `{}` is replaced by the condition text.
pub const JUDGE_PROMPT_TEMPLATE: &str = r#"You are given a text prompt used to generate image: "{}"
Below is one generated image: <image>

1. Describe the image thoroughly (objects, colors, layout, etc.), do not be affected by the prompt.
2. Score the generation quality from following aspects:
- Is the object in the generated image satisfying the category according to the prompt? (0-1 score)
- Is the generated image completed without missing parts? (0-1 score)
- Does the content of generated image look real and reasonable? (0-1 score)
- Is the generated image clear, bright and in high quality? (0-1 score)
- Is the generated image free of any noises, defects and artifacts? (0-1 score)

Your response should in a **JSON** format following rules below:
1. The final response should have three keys: "description", "score", "explanation".
2. The total score of the image should be store in "score" key, you may use float numbers for the scores. The value of total score should be between 0 and 5.
3. The reasoning and scoring process could be write in "explanation" for you to explain your score.
Following is a exmaple of response:

```json
{
"description": "The image shows a brown dog with one eye and two ears. its mouth is open and the its tongue is sticking out.",
    "score": 3.5,
"explanation": "The image shows a brown dog matches the prompt 'a photo of a dog' (1 score). The image is complete and all part can be seen (1 score). The dog in the photo looks unreal because it has only one eye and the eye position is not reasonable (0 score). The dog's face is clear but its body and background is blurred (0.5 score). The image do not have any noises, defects and artifacts (1 score). So the total score of this image is 1+1+0+0.5+1=3.5 ."
}
```

<image>
You need to inspect the image carefully and give a score according to the question below:
- Is the image an AI-generated image? If yes, give 0 score, otherwise give 1 score.
The answer should be in a JSON format as follows:
```json
{"score": 0}
```

<image>
You need to inspect the image carefully and give a score according to the question below:
- Is there any strange feature in the image? If yes, give 0 score, otherwise give 1 score.
The answer should be in a JSON format as follows:
```json
{"score": 0}
```"#;

pub const JUDGE_MAX_SCORE: f64 = 5.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
    #[error("judge response parse error: {0}")]
    Parse(String),
    #[error("judge not configured: {0}")]
    Configuration(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeVerdict {
    pub description: String,
    pub score: f64,
    pub explanation: String,
    /// Follow-up answer to the generated-image question, 0 or 1.
    pub fake: Option<u8>,
    /// Follow-up answer to the strange-feature question, 0 or 1.
    pub weird: Option<u8>,
}

/// Finds every balanced top-level `{...}` span that parses as a JSON object,
/// in order of appearance. Code fences need no special handling because the
/// fence markers sit outside the braces.
fn json_documents(text: &str) -> Vec<serde_json::Map<String, Value>> {
    let bytes = text.as_bytes();
    let mut docs = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] != b'{' {
            i += 1;
            continue;
        }
        match balanced_end(bytes, i) {
            Some(end) => match serde_json::from_str::<Value>(&text[i..=end]) {
                Ok(Value::Object(map)) => {
                    docs.push(map);
                    i = end + 1;
                }
                _ => i += 1,
            },
            None => i += 1,
        }
    }
    docs
}

fn balanced_end(bytes: &[u8], start: usize) -> Option<usize> {
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (k, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match (escaped, b) {
                (true, _) => escaped = false,
                (false, b'\\') => escaped = true,
                (false, b'"') => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(k);
                }
            }
            _ => {}
        }
    }
    None
}

fn score_of(doc: &serde_json::Map<String, Value>) -> Result<f64, JudgeError> {
    match doc.get("score") {
        Some(v) => v
            .as_f64()
            .filter(|s| s.is_finite())
            .ok_or_else(|| JudgeError::Parse(format!("\"score\" is not a finite number: {v}"))),
        None => Err(JudgeError::Parse("document has no \"score\" key".into())),
    }
}

fn binary(doc: &serde_json::Map<String, Value>) -> Result<u8, JudgeError> {
    let s = score_of(doc)?;
    if s == 0.0 {
        Ok(0)
    } else if s == 1.0 {
        Ok(1)
    } else {
        Err(JudgeError::Parse(format!("binary sub-score must be 0 or 1, got {s}")))
    }
}

/// Parses the first JSON document of a judge response. Later documents
/// carrying only a binary `"score"` fill the follow-up answers in order.
pub fn parse_judge_verdict(body: &str) -> Result<JudgeVerdict, JudgeError> {
    let docs = json_documents(body);
    let first = docs
        .first()
        .ok_or_else(|| JudgeError::Parse("no JSON document in response".into()))?;
    let raw = score_of(first)?;
    let score = raw.clamp(0.0, JUDGE_MAX_SCORE);
    if score != raw {
        log::warn!("judge score {raw} outside [0, {JUDGE_MAX_SCORE}], clamped to {score}");
    }
    let text = |key: &str| {
        first
            .get(key)
            .and_then(Value::as_str)
            .unwrap_or_default()
            .to_string()
    };
    let mut follow_ups = docs[1..]
        .iter()
        .filter(|d| d.len() == 1)
        .map(binary);
    let fake = follow_ups.next().transpose()?;
    let weird = follow_ups.next().transpose()?;
    Ok(JudgeVerdict {
        description: text("description"),
        score,
        explanation: text("explanation"),
        fake,
        weird,
    })
}

/// Parses a single follow-up answer such as `{"score": 0}`.
pub fn parse_binary_subscore(body: &str) -> Result<u8, JudgeError> {
    let docs = json_documents(body);
    let first = docs
        .first()
        .ok_or_else(|| JudgeError::Parse("no JSON document in response".into()))?;
    binary(first)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JudgeSettings {
    pub url: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
    pub backoff_ms: u64,
    pub max_in_flight: usize,
}

impl Default for JudgeSettings {
    fn default() -> Self {
        Self {
            url: None,
            timeout_ms: 10_000,
            retries: 2,
            backoff_ms: 200,
            max_in_flight: 4,
        }
    }
}

#[derive(Serialize)]
struct JudgeRequest<'a> {
    prompt: String,
    condition: &'a str,
    image_png_base64: String,
}

/// Blocking HTTP client for a remote image judge.
#[derive(Debug, Clone)]
pub struct JudgeClient {
    settings: JudgeSettings,
    url: String,
    agent: ureq::Agent,
}

impl JudgeClient {
    pub fn new(settings: JudgeSettings) -> Result<Self, JudgeError> {
        let url = settings
            .url
            .clone()
            .ok_or_else(|| JudgeError::Configuration("rewards.judge_url is not set".into()))?;
        if settings.max_in_flight == 0 {
            return Err(JudgeError::Configuration("max_in_flight must be positive".into()));
        }
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(settings.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            settings,
            url,
            agent,
        })
    }

    fn request_body(image: &ImageGrid, condition: &str) -> Result<String, JudgeError> {
        let png = encode_png_bytes(image).map_err(|e| JudgeError::Configuration(e.to_string()))?;
        let req = JudgeRequest {
            prompt: JUDGE_PROMPT_TEMPLATE.replacen("{}", condition, 1),
            condition,
            image_png_base64: base64::engine::general_purpose::STANDARD.encode(png),
        };
        serde_json::to_string(&req).map_err(|e| JudgeError::Configuration(e.to_string()))
    }

    fn post_once(&self, body: &str) -> Result<String, JudgeError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("content-type", "application/json")
            .send(body)
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(JudgeError::Unavailable(format!("HTTP status {status}")));
        }
        resp.body_mut()
            .read_to_string()
            .map_err(|e| JudgeError::Unavailable(e.to_string()))
    }

    /// One verdict, retrying transport failures with exponential backoff.
    /// Malformed responses are not retried.
    pub fn query(&self, image: &ImageGrid, condition: &str) -> Result<JudgeVerdict, JudgeError> {
        let body = Self::request_body(image, condition)?;
        let mut last = JudgeError::Unavailable("no attempt made".into());
        for attempt in 0..=self.settings.retries {
            if attempt > 0 {
                let wait = self.settings.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.post_once(&body) {
                Ok(text) => return parse_judge_verdict(&text),
                Err(e) => {
                    log::warn!("judge attempt {} of {} failed: {e}", attempt + 1, self.settings.retries + 1);
                    last = e;
                }
            }
        }
        Err(last)
    }

    /// Verdicts in input order with at most `max_in_flight` concurrent
    /// requests.
    pub fn query_many(&self, items: &[(ImageGrid, String)]) -> Vec<Result<JudgeVerdict, JudgeError>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(self.settings.max_in_flight) {
            let results: Vec<_> = thread::scope(|s| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|(img, cond)| s.spawn(move || self.query(img, cond)))
                    .collect();
                handles
                    .into_iter()
                    .map(|h| {
                        h.join()
                            .unwrap_or_else(|_| Err(JudgeError::Unavailable("request thread panicked".into())))
                    })
                    .collect()
            });
            out.extend(results);
        }
        out
    }
}
