//! Socket message format.
//!
//! Every message is one frame:
//!
//! | bytes | field                                         |
//! |-------|-----------------------------------------------|
//! | 4     | `u32` LE length `L` of the rest of the frame  |
//! | 1     | tag                                           |
//! | L - 1 | payload                                       |
//!
//! Payload fields are packed without padding. Integers are little-endian,
//! `f64` is its IEEE-754 bit pattern as a LE `u64`, a string is a `u32` LE
//! byte count then UTF-8, a parameter block is 27 `f64`, and an output row
//! is `u64` id then its 17 `f64` columns in CSV order.
//!
//! | tag  | message   | direction | payload                                           |
//! |------|-----------|-----------|---------------------------------------------------|
//! | 0x01 | HELLO     | to hub    | `u32` process                                     |
//! | 0x02 | CLAIM     | to hub    | `u8` blocking (0 or 1)                            |
//! | 0x03 | GET       | to hub    | `u64` source                                      |
//! | 0x04 | PUT       | to hub    | `u64` source, block                               |
//! | 0x05 | REPORT    | to hub    | `u64` task, `f64` processing, `f64` loading_wait, `u64` visits, `u64` newton_iterations, `u32` n, n rows, `u8` has_error, [string error] |
//! | 0x06 | ABORT     | to hub    | string reason                                     |
//! | 0x41 | WELCOME   | to worker | `u64` seed, `u32` threads, string config (TOML), string task file, string image dir |
//! | 0x42 | TASK      | to worker | `u64` task, `u32` n, n × `u64` neighbor ids       |
//! | 0x43 | NOT_NOW   | to worker | empty                                             |
//! | 0x44 | DONE      | to worker | empty                                             |
//! | 0x45 | BLOCK     | to worker | block                                             |
//! | 0x46 | STAMP     | to worker | `u64` stamp                                       |
//! | 0x47 | ACK       | to worker | empty                                             |
//! | 0x48 | ERROR     | to worker | string message                                    |
//!
//! A worker opens with HELLO and gets WELCOME. CLAIM is answered by TASK,
//! NOT_NOW or DONE, GET by BLOCK, PUT by STAMP, REPORT by ACK; any request
//! may instead get ERROR. GET reads the stage-start value.

use crate::error::{Error, Result};
use skyvi_core::catalog::OutputRow;
use skyvi_core::model::{ParamVec, PARAM_DIM};
use std::io::{Read, Write};

pub const MAX_FRAME: u32 = 64 << 20;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello { process: u32 },
    Claim { blocking: bool },
    Get { source: u64 },
    Put { source: u64, block: ParamVec },
    Report {
        task: u64,
        processing: f64,
        loading_wait: f64,
        visits: u64,
        newton_iterations: u64,
        rows: Vec<OutputRow>,
        error: Option<String>,
    },
    Abort { reason: String },
    Welcome {
        seed: u64,
        threads: u32,
        config: String,
        task_file: String,
        image_dir: String,
    },
    Task { task: u64, neighbors: Vec<u64> },
    NotNow,
    Done,
    Block { block: ParamVec },
    Stamp { stamp: u64 },
    Ack,
    Error { message: String },
}

struct Enc(Vec<u8>);

impl Enc {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn block(&mut self, b: &ParamVec) {
        for &v in b {
            self.f64(v);
        }
    }
    fn row(&mut self, r: &OutputRow) {
        self.u64(r.id);
        for v in row_values(r) {
            self.f64(v);
        }
    }
}

fn row_values(r: &OutputRow) -> [f64; 17] {
    [
        r.x,
        r.y,
        r.p_star,
        r.logflux_mean,
        r.logflux_sd,
        r.color1_mean,
        r.color1_sd,
        r.color2_mean,
        r.color2_sd,
        r.color3_mean,
        r.color3_sd,
        r.color4_mean,
        r.color4_sd,
        r.profile,
        r.eccentricity,
        r.scale,
        r.angle,
    ]
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Protocol(format!("payload ends at byte {} but {n} more are needed", self.buf.len())))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Protocol("string is not UTF-8".into()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Protocol(format!("flag byte {v}"))),
        }
    }
    fn block(&mut self) -> Result<ParamVec> {
        let mut b = [0.0; PARAM_DIM];
        for v in &mut b {
            *v = self.f64()?;
        }
        Ok(b)
    }
    fn count(&mut self, item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_bytes) > self.buf.len() - self.pos {
            return Err(Error::Protocol(format!("count {n} exceeds the payload")));
        }
        Ok(n)
    }
    fn row(&mut self) -> Result<OutputRow> {
        let id = self.u64()?;
        let mut v = [0.0; 17];
        for x in &mut v {
            *x = self.f64()?;
        }
        Ok(OutputRow {
            id,
            x: v[0],
            y: v[1],
            p_star: v[2],
            logflux_mean: v[3],
            logflux_sd: v[4],
            color1_mean: v[5],
            color1_sd: v[6],
            color2_mean: v[7],
            color2_sd: v[8],
            color3_mean: v[9],
            color3_sd: v[10],
            color4_mean: v[11],
            color4_sd: v[12],
            profile: v[13],
            eccentricity: v[14],
            scale: v[15],
            angle: v[16],
        })
    }
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => 0x01,
            Message::Claim { .. } => 0x02,
            Message::Get { .. } => 0x03,
            Message::Put { .. } => 0x04,
            Message::Report { .. } => 0x05,
            Message::Abort { .. } => 0x06,
            Message::Welcome { .. } => 0x41,
            Message::Task { .. } => 0x42,
            Message::NotNow => 0x43,
            Message::Done => 0x44,
            Message::Block { .. } => 0x45,
            Message::Stamp { .. } => 0x46,
            Message::Ack => 0x47,
            Message::Error { .. } => 0x48,
        }
    }

    /// The whole frame, length prefix included.
    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc(vec![0, 0, 0, 0, self.tag()]);
        match self {
            Message::Hello { process } => e.u32(*process),
            Message::Claim { blocking } => e.u8(*blocking as u8),
            Message::Get { source } => e.u64(*source),
            Message::Put { source, block } => {
                e.u64(*source);
                e.block(block);
            }
            Message::Report {
                task,
                processing,
                loading_wait,
                visits,
                newton_iterations,
                rows,
                error,
            } => {
                e.u64(*task);
                e.f64(*processing);
                e.f64(*loading_wait);
                e.u64(*visits);
                e.u64(*newton_iterations);
                e.u32(rows.len() as u32);
                for r in rows {
                    e.row(r);
                }
                e.u8(error.is_some() as u8);
                if let Some(msg) = error {
                    e.str(msg);
                }
            }
            Message::Abort { reason } => e.str(reason),
            Message::Welcome {
                seed,
                threads,
                config,
                task_file,
                image_dir,
            } => {
                e.u64(*seed);
                e.u32(*threads);
                e.str(config);
                e.str(task_file);
                e.str(image_dir);
            }
            Message::Task { task, neighbors } => {
                e.u64(*task);
                e.u32(neighbors.len() as u32);
                for &n in neighbors {
                    e.u64(n);
                }
            }
            Message::NotNow | Message::Done | Message::Ack => {}
            Message::Block { block } => e.block(block),
            Message::Stamp { stamp } => e.u64(*stamp),
            Message::Error { message } => e.str(message),
        }
        let len = (e.0.len() - 4) as u32;
        e.0[..4].copy_from_slice(&len.to_le_bytes());
        e.0
    }

    /// Decodes the bytes after the length prefix.
    pub fn decode(body: &[u8]) -> Result<Message> {
        let (&tag, payload) = body.split_first().ok_or_else(|| Error::Protocol("empty frame".into()))?;
        let mut d = Dec { buf: payload, pos: 0 };
        let m = match tag {
            0x01 => Message::Hello { process: d.u32()? },
            0x02 => Message::Claim { blocking: d.bool()? },
            0x03 => Message::Get { source: d.u64()? },
            0x04 => Message::Put {
                source: d.u64()?,
                block: d.block()?,
            },
            0x05 => {
                let task = d.u64()?;
                let processing = d.f64()?;
                let loading_wait = d.f64()?;
                let visits = d.u64()?;
                let newton_iterations = d.u64()?;
                let n = d.count(8 * 18)?;
                let rows = (0..n).map(|_| d.row()).collect::<Result<_>>()?;
                let error = if d.bool()? { Some(d.str()?) } else { None };
                Message::Report {
                    task,
                    processing,
                    loading_wait,
                    visits,
                    newton_iterations,
                    rows,
                    error,
                }
            }
            0x06 => Message::Abort { reason: d.str()? },
            0x41 => Message::Welcome {
                seed: d.u64()?,
                threads: d.u32()?,
                config: d.str()?,
                task_file: d.str()?,
                image_dir: d.str()?,
            },
            0x42 => {
                let task = d.u64()?;
                let n = d.count(8)?;
                let neighbors = (0..n).map(|_| d.u64()).collect::<Result<_>>()?;
                Message::Task { task, neighbors }
            }
            0x43 => Message::NotNow,
            0x44 => Message::Done,
            0x45 => Message::Block { block: d.block()? },
            0x46 => Message::Stamp { stamp: d.u64()? },
            0x47 => Message::Ack,
            0x48 => Message::Error { message: d.str()? },
            t => return Err(Error::Protocol(format!("unknown tag {t:#04x}"))),
        };
        if d.pos != payload.len() {
            return Err(Error::Protocol(format!(
                "{} trailing bytes after tag {tag:#04x}",
                payload.len() - d.pos
            )));
        }
        Ok(m)
    }
}

pub fn write_message(w: &mut impl Write, m: &Message) -> Result<()> {
    w.write_all(&m.encode())?;
    w.flush()?;
    Ok(())
}

/// `None` on a clean end of stream before a frame starts.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(Error::Protocol("stream ended inside a length prefix".into())),
            n => got += n,
        }
    }
    let len = u32::from_le_bytes(len);
    if len == 0 || len > MAX_FRAME {
        return Err(Error::Protocol(format!("frame length {len}")));
    }
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)?;
    Message::decode(&body).map(Some)
}
