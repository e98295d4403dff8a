//! Delivery of annotation requests to an external annotator.

use std::collections::VecDeque;
use std::fs;
use std::path::PathBuf;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;

/// Environment variable naming the HTTP annotator endpoint.
pub const ANNOTATOR_URL_ENV: &str = "VLDPO_ANNOTATOR_URL";

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("annotator did not answer within {0:?}")]
    Timeout(Duration),
    #[error("transport failure: {0}")]
    Failed(String),
}

/// Everything the annotator receives for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRequest {
    pub scene_id: String,
    pub prompt: String,
    /// Composite image as binary PPM.
    pub image_ppm: Vec<u8>,
    /// Zero-based attempt number; retries re-send the same request.
    pub attempt: usize,
}

pub trait Transport {
    /// Sends the request and returns the raw reply text.
    fn exchange(&mut self, req: &AnnotationRequest) -> Result<String, TransportError>;
}

/// File-based exchange: writes `requests/<id>.txt` and `requests/<id>.ppm`
/// and polls for `responses/<id>.txt`. A reply is consumed (deleted) once
/// read so that a retry waits for a fresh one. Annotators should write a
/// reply elsewhere and rename it into place so it is never read half-written.
#[derive(Debug, Clone)]
pub struct DirectoryTransport {
    pub root: PathBuf,
    pub timeout: Duration,
    pub poll: Duration,
}

impl DirectoryTransport {
    pub fn new(root: impl Into<PathBuf>, timeout: Duration) -> Self {
        Self {
            root: root.into(),
            timeout,
            poll: Duration::from_millis(50),
        }
    }
}

impl Transport for DirectoryTransport {
    fn exchange(&mut self, req: &AnnotationRequest) -> Result<String, TransportError> {
        let io = |e: std::io::Error| TransportError::Failed(e.to_string());
        let requests = self.root.join("requests");
        let responses = self.root.join("responses");
        fs::create_dir_all(&requests).map_err(io)?;
        fs::create_dir_all(&responses).map_err(io)?;
        // the prompt file appears last and whole: annotators key on it
        fs::write(requests.join(format!("{}.ppm", req.scene_id)), &req.image_ppm).map_err(io)?;
        let partial = requests.join(format!("{}.txt.part", req.scene_id));
        fs::write(&partial, &req.prompt).map_err(io)?;
        fs::rename(&partial, requests.join(format!("{}.txt", req.scene_id))).map_err(io)?;
        let reply = responses.join(format!("{}.txt", req.scene_id));
        let start = Instant::now();
        loop {
            if let Ok(text) = fs::read_to_string(&reply) {
                let _ = fs::remove_file(&reply);
                return Ok(text);
            }
            if start.elapsed() >= self.timeout {
                return Err(TransportError::Timeout(self.timeout));
            }
            thread::sleep(self.poll);
        }
    }
}

/// HTTP POST of `{prompt, image, scene_id}` (image base64-encoded PPM); the
/// response body is the reply text.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    pub url: String,
    pub timeout: Duration,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            timeout,
        }
    }

    /// Reads the endpoint from [`ANNOTATOR_URL_ENV`].
    pub fn from_env(timeout: Duration) -> Option<Self> {
        std::env::var(ANNOTATOR_URL_ENV).ok().map(|u| Self::new(u, timeout))
    }

    pub fn request_body(req: &AnnotationRequest) -> String {
        serde_json::json!({
            "prompt": req.prompt,
            "image": base64::engine::general_purpose::STANDARD.encode(&req.image_ppm),
            "scene_id": req.scene_id,
        })
        .to_string()
    }
}

impl Transport for HttpTransport {
    fn exchange(&mut self, req: &AnnotationRequest) -> Result<String, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(self.timeout))
            .build()
            .into();
        let resp = agent
            .post(&self.url)
            .header("Content-Type", "application/json")
            .send(Self::request_body(req));
        match resp {
            Ok(mut r) => r
                .body_mut()
                .read_to_string()
                .map_err(|e| TransportError::Failed(e.to_string())),
            Err(ureq::Error::Timeout(_)) => Err(TransportError::Timeout(self.timeout)),
            Err(e) => Err(TransportError::Failed(e.to_string())),
        }
    }
}

/// Replays canned replies in order; the last one repeats. Records every
/// request it sees.
#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    replies: VecDeque<Result<String, TransportError>>,
    pub seen: Vec<AnnotationRequest>,
}

impl MockTransport {
    pub fn new(replies: Vec<Result<String, TransportError>>) -> Self {
        Self {
            replies: replies.into(),
            seen: Vec::new(),
        }
    }
}

impl Transport for MockTransport {
    fn exchange(&mut self, req: &AnnotationRequest) -> Result<String, TransportError> {
        self.seen.push(req.clone());
        match self.replies.len() {
            0 => Err(TransportError::Failed("mock has no replies".into())),
            1 => self.replies[0].clone(),
            _ => self.replies.pop_front().expect("non-empty"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req() -> AnnotationRequest {
        AnnotationRequest {
            scene_id: "s1".into(),
            prompt: "pick one".into(),
            image_ppm: b"P6\n1 1\n255\n\x01\x02\x03".to_vec(),
            attempt: 0,
        }
    }

    #[test]
    fn directory_exchange_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let responder = {
            let root = root.clone();
            thread::spawn(move || {
                let prompt = root.join("requests/s1.txt");
                while !prompt.exists() {
                    thread::sleep(Duration::from_millis(5));
                }
                assert!(root.join("requests/s1.ppm").exists());
                fs::write(root.join("responses/s1.txt"), "HLA: Backup | SELECTED: 1").unwrap();
            })
        };
        let mut t = DirectoryTransport::new(&root, Duration::from_secs(10));
        t.poll = Duration::from_millis(5);
        assert_eq!(t.exchange(&req()).unwrap(), "HLA: Backup | SELECTED: 1");
        responder.join().unwrap();
        assert!(!root.join("responses/s1.txt").exists());
    }

    #[test]
    fn directory_exchange_times_out() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = DirectoryTransport::new(dir.path(), Duration::from_millis(30));
        t.poll = Duration::from_millis(5);
        assert!(matches!(t.exchange(&req()), Err(TransportError::Timeout(_))));
    }

    #[test]
    fn http_posts_json_with_base64_image() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let reply = "HLA: Pullover | SELECTED: 4";
            let mut w = stream;
            write!(
                w,
                "HTTP/1.1 200 OK\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
            String::from_utf8(body).unwrap()
        });
        let mut t = HttpTransport::new(format!("http://{addr}/annotate"), Duration::from_secs(10));
        assert_eq!(t.exchange(&req()).unwrap(), "HLA: Pullover | SELECTED: 4");
        let body: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
        assert_eq!(body["scene_id"], "s1");
        assert_eq!(body["prompt"], "pick one");
        let img = base64::engine::general_purpose::STANDARD
            .decode(body["image"].as_str().unwrap())
            .unwrap();
        assert_eq!(img, req().image_ppm);
    }
}
