//! Adapter for real pretrained models running in a separate worker process.
//!
//! The worker is launched from the command line in `DIFFINTERP_WORKER` and
//! speaks newline-delimited JSON over stdio. Its first output line is the
//! [`BackendCaps`] object. Every request is one JSON object with an `op`
//! field; every response is either `{"ok": <value>}` or `{"error": "..."}`.
//!
//! | op                 | request fields                                              | `ok` value                  |
//! |--------------------|-------------------------------------------------------------|-----------------------------|
//! | `encode_image`     | `image`                                                     | flat latent (c·h·w floats)  |
//! | `decode_latent`    | `latent`                                                    | `image`                     |
//! | `predict_noise`    | `latent, timestep, num_steps, alpha, sigma, embedding, pose` | flat noise                  |
//! | `embedding_vjp`    | same as `predict_noise` plus `cotangent`                    | flat embedding gradient     |
//! | `encode_text`      | `prompt`                                                    | flat embedding              |
//! | `clip_similarity`  | `image, prompt`                                             | number                      |
//! | `extract_pose`     | `image`                                                     | skeleton JSON or `null`     |
//!
//! Images travel as `{"width", "height", "data"}` with interleaved RGB
//! floats. The model weights directory is forwarded in `DIFFINTERP_WEIGHTS`.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use parking_lot::Mutex;
use serde_json::{json, Value};

use super::{Backend, BackendCaps, Embedding, Image};
use crate::diffusion::latent::{check_shape, from_flat};
use crate::diffusion::{Latent, Noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::pose::PoseSkeleton;

pub const WORKER_ENV: &str = "DIFFINTERP_WORKER";
pub const WEIGHTS_ENV: &str = "DIFFINTERP_WEIGHTS";

struct Pipe {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

pub struct ProcessBackend {
    caps: BackendCaps,
    pipe: Mutex<Pipe>,
}

impl std::fmt::Debug for ProcessBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProcessBackend").field("caps", &self.caps).finish()
    }
}

fn unavailable(e: impl std::fmt::Display) -> Error {
    Error::BackendUnavailable(e.to_string())
}

impl ProcessBackend {
    pub fn from_env() -> Result<Self> {
        let cmd = std::env::var(WORKER_ENV)
            .map_err(|_| unavailable(format!("{WORKER_ENV} is not set")))?;
        let parts: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
        Self::spawn(&parts)
    }

    pub fn spawn(argv: &[String]) -> Result<Self> {
        let (prog, args) = argv
            .split_first()
            .ok_or_else(|| unavailable("empty worker command"))?;
        let mut command = Command::new(prog);
        command
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Ok(weights) = std::env::var(WEIGHTS_ENV) {
            command.env(WEIGHTS_ENV, weights);
        }
        let mut child = command.spawn().map_err(unavailable)?;
        let stdin = child.stdin.take().ok_or_else(|| unavailable("no worker stdin"))?;
        let mut stdout = BufReader::new(child.stdout.take().ok_or_else(|| unavailable("no worker stdout"))?);
        let mut line = String::new();
        stdout.read_line(&mut line).map_err(unavailable)?;
        let caps: BackendCaps = serde_json::from_str(&line)
            .map_err(|e| unavailable(format!("bad capability line from worker: {e}")))?;
        Ok(Self {
            caps,
            pipe: Mutex::new(Pipe { child, stdin, stdout }),
        })
    }

    fn call(&self, request: Value) -> Result<Value> {
        let mut pipe = self.pipe.lock();
        let mut line = serde_json::to_string(&request)?;
        line.push('\n');
        pipe.stdin.write_all(line.as_bytes()).map_err(unavailable)?;
        pipe.stdin.flush().map_err(unavailable)?;
        let mut reply = String::new();
        let n = pipe.stdout.read_line(&mut reply).map_err(unavailable)?;
        if n == 0 {
            return Err(unavailable("worker exited"));
        }
        let mut reply: Value = serde_json::from_str(&reply)?;
        if let Some(err) = reply.get("error") {
            return Err(Error::BackendUnavailable(err.as_str().unwrap_or("worker error").to_owned()));
        }
        Ok(reply.get_mut("ok").map(Value::take).unwrap_or(Value::Null))
    }

    fn floats(v: Value) -> Result<Vec<f64>> {
        Ok(serde_json::from_value(v)?)
    }

    fn latent_array(&self, v: Value) -> Result<ndarray::Array3<f64>> {
        from_flat(self.caps.latent_shape, Self::floats(v)?)
    }

    fn noise_request(
        &self,
        op: &str,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Value> {
        check_shape(self.caps.latent_shape, z.shape())?;
        let t = z.timestep;
        schedule.check_timestep(t)?;
        Ok(json!({
            "op": op,
            "latent": z.as_slice(),
            "timestep": t,
            "num_steps": schedule.num_steps(),
            "alpha": schedule.alpha(t),
            "sigma": schedule.sigma(t),
            "embedding": embedding.values,
            "pose": pose,
        }))
    }
}

impl Drop for ProcessBackend {
    fn drop(&mut self) {
        let pipe = self.pipe.get_mut();
        let _ = pipe.child.kill();
        let _ = pipe.child.wait();
    }
}

impl Backend for ProcessBackend {
    fn name(&self) -> &str {
        "process"
    }

    fn caps(&self) -> &BackendCaps {
        &self.caps
    }

    fn encode_image(&self, image: &Image) -> Result<Latent> {
        if image.size() != self.caps.image_size {
            return Err(Error::ShapeMismatch {
                expected: vec![self.caps.image_size.0 as usize, self.caps.image_size.1 as usize],
                actual: vec![image.width() as usize, image.height() as usize],
            });
        }
        let v = self.call(json!({"op": "encode_image", "image": image}))?;
        Latent::clean(self.latent_array(v)?)
    }

    fn decode_latent(&self, z: &Latent) -> Result<Image> {
        if z.timestep != 0 {
            return Err(Error::InvalidTimestep(format!(
                "can only decode clean latents, got timestep {}",
                z.timestep
            )));
        }
        let v = self.call(json!({"op": "decode_latent", "latent": z.as_slice()}))?;
        Ok(serde_json::from_value(v)?)
    }

    fn predict_noise_conditional(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
    ) -> Result<Noise> {
        let req = self.noise_request("predict_noise", z, embedding, pose, schedule)?;
        self.latent_array(self.call(req)?)
    }

    fn embedding_vjp(
        &self,
        z: &Latent,
        embedding: &Embedding,
        pose: Option<&Image>,
        schedule: &NoiseSchedule,
        cotangent: &Noise,
    ) -> Result<Vec<f64>> {
        if !self.caps.supports_grad_wrt_embedding {
            return Err(Error::Unsupported("gradients with respect to the prompt embedding"));
        }
        let mut req = self.noise_request("embedding_vjp", z, embedding, pose, schedule)?;
        req["cotangent"] = json!(cotangent.iter().collect::<Vec<_>>());
        Self::floats(self.call(req)?)
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let v = self.call(json!({"op": "encode_text", "prompt": prompt}))?;
        Embedding::new(self.caps.embedding_shape.clone(), Self::floats(v)?)
    }

    fn clip_similarity(&self, image: &Image, prompt: &str) -> Result<f64> {
        let v = self.call(json!({"op": "clip_similarity", "image": image, "prompt": prompt}))?;
        v.as_f64().ok_or_else(|| unavailable("non-numeric similarity"))
    }

    fn extract_pose(&self, image: &Image) -> Result<Option<PoseSkeleton>> {
        let v = self.call(json!({"op": "extract_pose", "image": image}))?;
        let skeleton: Option<PoseSkeleton> = serde_json::from_value(v)?;
        if let Some(s) = &skeleton {
            s.validate()?;
        }
        Ok(skeleton.filter(|s| !s.is_empty()))
    }
}
