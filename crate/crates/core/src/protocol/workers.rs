//! One thread per stage, exchanging frames over bounded channels.
//!
//! A coordinator hands every worker the same `(step, sample)` command.
//! Worker `i` owns its parameters, the sender copy of boundary `i + 1` and
//! the receiver copy of boundary `i`, plus the random streams of the side it
//! plays on each boundary. Divergence or a failure makes the worker emit
//! halt frames on every link a neighbour is still waiting on, so each step
//! always completes on every worker.

use std::collections::HashMap;

use crossbeam_channel::{bounded, Receiver, Sender};

use super::buffer::{backward_exchange, forward_receive, forward_send};
use super::engine::{Schedule, StepMetrics};
use super::wire::{decode_frame, encode_frame, halt_frame, Direction};
use super::{
    ActivationBuffer, Mode, ProtocolError, Result, SampleId, TrainConfig, UpdateOrder,
    DIVERGENCE_LOSS,
};
use crate::model::{Dataset, LossHead, PipelineModel, Stage};
use crate::numerics::{RngStream, StreamId, Vector};
use crate::quantize::dequantize;

pub(crate) struct WorkerRun {
    pub metrics: Vec<StepMetrics>,
    pub model: PipelineModel,
    pub buffers: Vec<ActivationBuffer>,
    pub diverged: bool,
    pub diverged_at: Option<u64>,
}

enum Command {
    Step { step: u64, sample: SampleId },
    Finish,
}

#[derive(Default)]
struct Report {
    loss: Option<f64>,
    bytes_fw: u64,
    bytes_bw: u64,
    delta: Option<f64>,
    residual: Option<f64>,
    change: Option<f64>,
    first_visit: bool,
    grad_sq: f64,
    sender_digest: Option<[u8; 32]>,
    receiver_digest: Option<[u8; 32]>,
    halted: bool,
    error: Option<ProtocolError>,
}

enum Reply {
    Step(usize, Box<Report>),
    Done(usize, Vector, Option<ActivationBuffer>),
}

struct Links {
    fwd_in: Option<Receiver<Vec<u8>>>,
    fwd_out: Option<Sender<Vec<u8>>>,
    bwd_in: Option<Receiver<Vec<u8>>>,
    bwd_out: Option<Sender<Vec<u8>>>,
}

struct Worker<'a> {
    index: usize,
    last: bool,
    stage: Stage,
    head: LossHead,
    params: Vector,
    cfg: &'a TrainConfig,
    lr: f64,
    data: &'a Dataset,
    links: Links,
    sender_buf: Option<ActivationBuffer>,
    receiver_buf: Option<ActivationBuffer>,
    rng_fwd: Option<RngStream>,
    rng_buf_send: Option<RngStream>,
    rng_buf_recv: Option<RngStream>,
    rng_bwd: Option<RngStream>,
    /// Last activation sent for each sample.
    previous: HashMap<SampleId, Vector>,
}

/// Which halt frames a worker still owes for the current step.
struct Pending {
    forward: bool,
    backward: bool,
}

enum Phase<T> {
    Value(T),
    Halt,
}

fn recv(rx: &Receiver<Vec<u8>>) -> Result<Vec<u8>> {
    rx.recv()
        .map_err(|_| ProtocolError::Worker("neighbour hung up".into()))
}

impl Worker<'_> {
    fn boundary_out(&self) -> u16 {
        self.index as u16 + 1
    }

    fn boundary_in(&self) -> u16 {
        self.index as u16
    }

    fn halt(&self, pending: &Pending, step: u64, sample: SampleId) {
        if pending.forward {
            if let Some(tx) = &self.links.fwd_out {
                let _ = tx.send(halt_frame(step, sample, self.boundary_out()));
            }
        }
        if pending.backward {
            if let Some(tx) = &self.links.bwd_out {
                let _ = tx.send(halt_frame(step, sample, self.boundary_in()));
            }
        }
    }

    fn check_header(&self, h: &super::wire::FrameHeader, step: u64, sample: SampleId, boundary: u16) -> Result<()> {
        if h.step != step || h.sample != sample || h.boundary != boundary {
            return Err(ProtocolError::Corrupt(format!(
                "worker {} expected step {step} sample {sample} boundary {boundary}, got {:?}",
                self.index, h
            )));
        }
        Ok(())
    }

    fn run_step(&mut self, step: u64, sample: SampleId, pending: &mut Pending, report: &mut Report) -> Result<()> {
        let mode = self.cfg.mode;
        let fw = self.cfg.effective_fw();
        let bw = self.cfg.effective_bw();
        let aq = mode == Mode::AqSgd;
        let input = match &self.links.fwd_in {
            None => self.data.input(sample as usize).clone(),
            Some(rx) => {
                let frame = recv(rx)?;
                let (h, payload) = decode_frame(&frame, &fw, self.stage.input_dim())?;
                self.check_header(&h, step, sample, self.boundary_in())?;
                match payload {
                    None => {
                        // Upstream halted before sending; nobody waits on our gradient.
                        pending.backward = false;
                        report.halted = true;
                        self.halt(pending, step, sample);
                        pending.forward = false;
                        return Ok(());
                    }
                    Some(p) => forward_receive(
                        mode,
                        &fw,
                        self.receiver_buf.as_mut().filter(|_| aq),
                        sample,
                        step,
                        &p,
                        self.rng_buf_recv.as_mut().expect("receiver stream"),
                    )?,
                }
            }
        };
        let out = self.stage.forward(&self.params, &input)?;
        let upstream = if self.last {
            let y = self.data.target(sample as usize);
            let loss = self.head.loss(&out, y)?;
            report.loss = Some(loss);
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                report.halted = true;
                self.halt(pending, step, sample);
                pending.backward = false;
                return Ok(());
            }
            Phase::Value(self.head.grad(&out, y)?)
        } else {
            let send = forward_send(
                mode,
                &fw,
                self.sender_buf.as_mut().filter(|_| aq),
                sample,
                step,
                &out,
                self.rng_fwd.as_mut().expect("forward stream"),
                self.rng_buf_send.as_mut().expect("buffer stream"),
            )?;
            report.delta = Some(out.sub(&send.received)?.l2_norm());
            report.residual = Some(send.residual);
            report.first_visit = send.first_visit;
            report.bytes_fw = send.bytes;
            report.change = Some(match self.previous.get(&sample) {
                Some(p) => out.sub(p)?.l2_norm(),
                None => 0.0,
            });
            self.previous.insert(sample, out.clone());
            let frame = encode_frame(step, sample, self.boundary_out(), Direction::Forward, &fw, &send.payload);
            self.links
                .fwd_out
                .as_ref()
                .expect("downstream link")
                .send(frame)
                .map_err(|_| ProtocolError::Worker("downstream hung up".into()))?;
            pending.forward = false;
            let frame = recv(self.links.bwd_in.as_ref().expect("gradient link"))?;
            let (h, payload) = decode_frame(&frame, &bw, self.stage.output_dim())?;
            self.check_header(&h, step, sample, self.boundary_out())?;
            match payload {
                None => Phase::Halt,
                Some(p) => Phase::Value(dequantize(&bw, &p)?),
            }
        };
        let g = match upstream {
            Phase::Halt => {
                report.halted = true;
                self.halt(pending, step, sample);
                pending.backward = false;
                return Ok(());
            }
            Phase::Value(g) => g,
        };
        let (pg, mut ig) = self.stage.backward(&self.params, &input, &g)?;
        let sequential = self.cfg.order == UpdateOrder::Sequential;
        let updated = if sequential {
            let p = self.params.axpy(-self.lr, &pg)?;
            ig = self.stage.backward(&p, &input, &g)?.1;
            Some(p)
        } else {
            None
        };
        if let Some(tx) = &self.links.bwd_out {
            let (payload, _, bytes) = backward_exchange(
                &ig,
                self.stage.input_dim(),
                &bw,
                self.rng_bwd.as_mut().expect("backward stream"),
            )?;
            report.bytes_bw = bytes;
            tx.send(encode_frame(step, sample, self.boundary_in(), Direction::Backward, &bw, &payload))
                .map_err(|_| ProtocolError::Worker("upstream hung up".into()))?;
            pending.backward = false;
        }
        self.params = match updated {
            Some(p) => p,
            None => self.params.axpy(-self.lr, &pg)?,
        };
        report.grad_sq = pg.iter().map(|v| v * v).sum();
        report.sender_digest = self.sender_buf.as_ref().map(ActivationBuffer::digest);
        report.receiver_digest = self.receiver_buf.as_ref().map(ActivationBuffer::digest);
        Ok(())
    }

    fn run(mut self, commands: Receiver<Command>, replies: Sender<Reply>) {
        while let Ok(cmd) = commands.recv() {
            match cmd {
                Command::Step { step, sample } => {
                    let mut pending = Pending {
                        forward: !self.last,
                        backward: self.index > 0,
                    };
                    let mut report = Report::default();
                    if let Err(e) = self.run_step(step, sample, &mut pending, &mut report) {
                        self.halt(&pending, step, sample);
                        report.halted = true;
                        report.error = Some(e);
                    }
                    if replies.send(Reply::Step(self.index, Box::new(report))).is_err() {
                        return;
                    }
                }
                Command::Finish => {
                    let _ = replies.send(Reply::Done(self.index, self.params, self.sender_buf));
                    return;
                }
            }
        }
    }
}

pub(crate) fn run_workers(
    model: PipelineModel,
    data: &Dataset,
    cfg: &TrainConfig,
    lr: f64,
    schedule: Schedule,
) -> Result<WorkerRun> {
    let k = model.num_stages();
    let dims = model.boundary_dims();
    let aq = cfg.mode == Mode::AqSgd;
    let (reply_tx, reply_rx) = bounded::<Reply>(k);
    let mut command_txs = Vec::with_capacity(k);
    let mut workers = Vec::with_capacity(k);
    let fwd: Vec<_> = (0..k - 1).map(|_| bounded::<Vec<u8>>(1)).collect();
    let bwd: Vec<_> = (0..k - 1).map(|_| bounded::<Vec<u8>>(1)).collect();
    for i in 0..k {
        let (ctx, crx) = bounded::<Command>(1);
        command_txs.push(ctx);
        let out_id = i as u16 + 1;
        let in_id = i as u16;
        let links = Links {
            fwd_in: (i > 0).then(|| fwd[i - 1].1.clone()),
            fwd_out: (i < k - 1).then(|| fwd[i].0.clone()),
            bwd_in: (i < k - 1).then(|| bwd[i].1.clone()),
            bwd_out: (i > 0).then(|| bwd[i - 1].0.clone()),
        };
        let worker = Worker {
            index: i,
            last: i == k - 1,
            stage: model.stage(i).clone(),
            head: model.head(),
            params: model.params()[i].clone(),
            cfg,
            lr,
            data,
            links,
            sender_buf: (aq && i < k - 1).then(|| ActivationBuffer::new(out_id, dims[i], cfg.buffer)),
            receiver_buf: (aq && i > 0).then(|| ActivationBuffer::new(in_id, dims[i - 1], cfg.buffer)),
            rng_fwd: (i < k - 1).then(|| RngStream::new(cfg.seed, StreamId::Forward(out_id))),
            rng_buf_send: (i < k - 1).then(|| RngStream::new(cfg.seed, StreamId::Buffer(out_id))),
            rng_buf_recv: (i > 0).then(|| RngStream::new(cfg.seed, StreamId::Buffer(in_id))),
            rng_bwd: (i > 0).then(|| RngStream::new(cfg.seed, StreamId::Backward(in_id))),
            previous: HashMap::new(),
        };
        workers.push((worker, crx));
    }
    drop(fwd);
    drop(bwd);

    std::thread::scope(|scope| {
        for (worker, crx) in workers {
            let tx = reply_tx.clone();
            scope.spawn(move || worker.run(crx, tx));
        }
        drop(reply_tx);
        let result = coordinate(&command_txs, &reply_rx, k, schedule, aq);
        for tx in &command_txs {
            let _ = tx.send(Command::Finish);
        }
        let mut params: Vec<Option<Vector>> = vec![None; k];
        let mut buffers: Vec<Option<ActivationBuffer>> = vec![None; k];
        for reply in reply_rx.iter() {
            if let Reply::Done(i, p, b) = reply {
                params[i] = Some(p);
                buffers[i] = b;
            }
        }
        let (metrics, diverged_at) = result?;
        let params = params
            .into_iter()
            .map(|p| p.ok_or_else(|| ProtocolError::Worker("worker exited early".into())))
            .collect::<Result<Vec<_>>>()?;
        let mut model = model.clone();
        model.set_params(params)?;
        Ok(WorkerRun {
            metrics,
            model,
            buffers: buffers.into_iter().flatten().collect(),
            diverged: diverged_at.is_some(),
            diverged_at,
        })
    })
}

fn coordinate(
    commands: &[Sender<Command>],
    replies: &Receiver<Reply>,
    k: usize,
    schedule: Schedule,
    aq: bool,
) -> Result<(Vec<StepMetrics>, Option<u64>)> {
    let mut metrics = Vec::new();
    for (step, epoch, sample) in schedule {
        for tx in commands {
            tx.send(Command::Step { step, sample })
                .map_err(|_| ProtocolError::Worker("worker exited".into()))?;
        }
        let mut reports: Vec<Option<Box<Report>>> = (0..k).map(|_| None).collect();
        for _ in 0..k {
            match replies.recv() {
                Ok(Reply::Step(i, r)) => reports[i] = Some(r),
                Ok(Reply::Done(..)) | Err(_) => {
                    return Err(ProtocolError::Worker("worker exited mid-step".into()))
                }
            }
        }
        let reports: Vec<Box<Report>> = reports.into_iter().map(|r| r.expect("one reply per worker")).collect();
        let mut failure = None;
        for r in &reports {
            if let Some(e) = &r.error {
                if !e.is_non_finite() {
                    failure = Some(e.clone());
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        if reports.iter().any(|r| r.halted) {
            return Ok((metrics, Some(step)));
        }
        if aq {
            for j in 0..k - 1 {
                if reports[j].sender_digest != reports[j + 1].receiver_digest {
                    return Err(ProtocolError::BufferDivergence {
                        step,
                        boundary: j as u16 + 1,
                    });
                }
            }
        }
        let grad_sq: Vec<f64> = reports.iter().map(|r| r.grad_sq).collect();
        metrics.push(StepMetrics {
            step,
            epoch,
            sample,
            loss: reports[k - 1].loss.expect("last worker reports the loss"),
            grad_norm: grad_sq.iter().sum::<f64>().sqrt(),
            delta_norms: reports[..k - 1].iter().map(|r| r.delta.unwrap_or(0.0)).collect(),
            residual_norms: reports[..k - 1].iter().map(|r| r.residual.unwrap_or(0.0)).collect(),
            activation_change_norms: reports[..k - 1].iter().map(|r| r.change.unwrap_or(0.0)).collect(),
            first_visit: reports.iter().any(|r| r.first_visit),
            bytes_fw: reports.iter().map(|r| r.bytes_fw).sum(),
            bytes_bw: reports.iter().map(|r| r.bytes_bw).sum(),
            analysis: None,
        });
    }
    Ok((metrics, None))
}
