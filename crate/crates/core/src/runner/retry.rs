use std::future::Future;
use std::time::Duration;

use crate::backend::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_base: Duration,
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): `base * 2^attempt`.
    pub fn delay(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(2u32.saturating_pow(attempt))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retried<T> {
    pub value: T,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{error} (after {retries} retries)")]
pub struct RetryFailure {
    pub error: BackendError,
    pub retries: u32,
}

/// Run `op`, retrying transport failures and rate limiting with exponential
/// backoff. A server-provided retry-after wins when it is longer.
pub async fn with_retries<T, F, Fut>(policy: RetryPolicy, mut op: F) -> Result<Retried<T>, RetryFailure>
where
    F: FnMut() -> Fut,
    Fut: Future<Output = Result<T, BackendError>>,
{
    let mut retries = 0;
    loop {
        match op().await {
            Ok(value) => return Ok(Retried { value, retries }),
            Err(error) if error.is_retryable() && retries < policy.max_retries => {
                let mut delay = policy.delay(retries);
                if let BackendError::RateLimited { retry_after: Some(server) } = &error {
                    delay = delay.max(*server);
                }
                tracing::debug!(%error, attempt = retries + 1, ?delay, "retrying request");
                tokio::time::sleep(delay).await;
                retries += 1;
            }
            Err(error) => return Err(RetryFailure { error, retries }),
        }
    }
}
