//! HTTP+JSON client for a remote scoring/training service.
//!
//! Endpoints, relative to the base URL: `score-mask`, `generate`,
//! `first-token`, `train`, `train-status`. Request and response bodies
//! mirror the trait signatures; floats travel as JSON decimals at full
//! round-trip precision. Training is idempotent per request id, so
//! transport retries are safe.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{
    count_placeholders, validate_candidates, validate_first_tokens, BackendError, FineTuneConfig,
    GenerationParams, GenerationResult, LmBackend, LossSpec, MaskFillResult,
};
use crate::float::Scalar;

#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Transport-level retries per request (idempotent request ids).
    pub max_retries: usize,
    pub poll_interval: Duration,
    pub request_timeout: Duration,
}

impl RemoteConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            max_retries: 3,
            poll_interval: Duration::from_millis(200),
            request_timeout: Duration::from_secs(120),
        }
    }
}

pub struct RemoteBackend<F: Scalar> {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
    _marker: std::marker::PhantomData<F>,
}

#[derive(Serialize)]
struct ScoreMaskRequest<'a> {
    model: &'a str,
    input: &'a str,
    candidates: &'a [String],
}

#[derive(Deserialize)]
#[serde(bound = "")]
struct ScoreMaskResponse<F: Scalar> {
    per_mask_scores: Vec<BTreeMap<String, F>>,
}

#[derive(Serialize)]
struct GenerateRequest<'a> {
    model: &'a str,
    input: &'a str,
    beam_size: usize,
    max_new_tokens: usize,
    suppress_eos_until: usize,
}

#[derive(Serialize)]
struct FirstTokenRequest<'a> {
    model: &'a str,
    input: &'a str,
    first_tokens: &'a [String],
}

#[derive(Deserialize)]
#[serde(bound = "")]
struct FirstTokenResponse<F: Scalar> {
    scores: BTreeMap<String, F>,
}

#[derive(Serialize)]
#[serde(bound = "")]
struct TrainRequest<'a, F: Scalar> {
    model: &'a str,
    request_id: &'a str,
    dataset: &'a [(String, String)],
    loss: &'a LossSpec<F>,
    config: &'a FineTuneConfig,
}

#[derive(Deserialize)]
struct TrainResponse {
    job_id: String,
}

#[derive(Deserialize)]
struct TrainStatusResponse {
    status: String,
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    message: Option<String>,
}

#[derive(Deserialize)]
struct ErrorBody {
    error: String,
}

impl<F: Scalar> RemoteBackend<F> {
    pub fn new(config: RemoteConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.request_timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            client,
            _marker: std::marker::PhantomData,
        })
    }

    fn url(&self, endpoint: &str) -> String {
        format!("{}/{endpoint}", self.config.base_url.trim_end_matches('/'))
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        endpoint: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let mut last_err = None;
        for _ in 0..=self.config.max_retries {
            match self.client.post(self.url(endpoint)).json(body).send() {
                Ok(response) => {
                    let status = response.status();
                    if status.is_success() {
                        return response
                            .json::<Resp>()
                            .map_err(|e| BackendError::Transport(e.to_string()));
                    }
                    // Service-level failures are not retried.
                    let message = response
                        .json::<ErrorBody>()
                        .map(|b| b.error)
                        .unwrap_or_else(|_| status.to_string());
                    return Err(BackendError::Service(message));
                }
                Err(e) => last_err = Some(e),
            }
        }
        Err(BackendError::Transport(
            last_err.map(|e| e.to_string()).unwrap_or_default(),
        ))
    }
}

impl<F: Scalar> LmBackend<F> for RemoteBackend<F> {
    fn mask_fill(
        &self,
        input: &str,
        candidates: &[String],
    ) -> Result<MaskFillResult<F>, BackendError> {
        count_placeholders(input)?;
        validate_candidates(candidates)?;
        let response: ScoreMaskResponse<F> = self.post(
            "score-mask",
            &ScoreMaskRequest {
                model: &self.config.model,
                input,
                candidates,
            },
        )?;
        Ok(MaskFillResult {
            per_mask_scores: response.per_mask_scores,
        })
    }

    fn generate(
        &self,
        input: &str,
        params: &GenerationParams,
    ) -> Result<GenerationResult, BackendError> {
        params.validate()?;
        self.post(
            "generate",
            &GenerateRequest {
                model: &self.config.model,
                input,
                beam_size: params.beam_size,
                max_new_tokens: params.max_new_tokens,
                suppress_eos_until: params.suppress_eos_until,
            },
        )
    }

    fn first_token_distribution(
        &self,
        input: &str,
        first_tokens: &[String],
    ) -> Result<BTreeMap<String, F>, BackendError> {
        validate_first_tokens(first_tokens)?;
        let response: FirstTokenResponse<F> = self.post(
            "first-token",
            &FirstTokenRequest {
                model: &self.config.model,
                input,
                first_tokens,
            },
        )?;
        Ok(response.scores)
    }

    fn first_token(&self, text: &str) -> Result<String, BackendError> {
        // Client-side approximation; the candidate single-token check proper
        // happens server-side in score-mask.
        text.split_whitespace()
            .next()
            .map(|t| t.to_lowercase())
            .ok_or(BackendError::EmptyText)
    }

    fn fine_tune(
        &self,
        dataset: &[(String, String)],
        loss: &LossSpec<F>,
        cfg: &FineTuneConfig,
    ) -> Result<Box<dyn LmBackend<F>>, BackendError> {
        if dataset.is_empty() {
            return Err(BackendError::EmptyDataset);
        }
        let request_id = Uuid::new_v4().to_string();
        let response: TrainResponse = self.post(
            "train",
            &TrainRequest {
                model: &self.config.model,
                request_id: &request_id,
                dataset,
                loss,
                config: cfg,
            },
        )?;

        loop {
            let status: TrainStatusResponse = self.post(
                "train-status",
                &serde_json::json!({ "job_id": response.job_id }),
            )?;
            match status.status.as_str() {
                "done" => {
                    let model = status.model.unwrap_or_else(|| self.config.model.clone());
                    let mut config = self.config.clone();
                    config.model = model;
                    return Ok(Box::new(RemoteBackend::<F>::new(config)?));
                }
                "failed" => {
                    return Err(BackendError::TrainingFailed(
                        status.message.unwrap_or_else(|| "unknown".to_string()),
                    ));
                }
                _ => std::thread::sleep(self.config.poll_interval),
            }
        }
    }

    fn model_id(&self) -> String {
        self.config.model.clone()
    }
}
