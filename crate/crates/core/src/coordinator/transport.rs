//! Boundary transports.
//!
//! The coordinator talks to the point-on-wave engine through
//! [`DetailedLink`], which either owns the engine directly or speaks to an
//! identical engine hosted behind a loopback socket. The wire protocol is
//! length-prefixed binary with little-endian `f64` payloads, so numbers
//! survive the trip bit-for-bit and both paths produce identical results.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread::JoinHandle;

use super::engine::{EmtEngine, EmtSideConfig, IntervalReply, PortBoundary};
use crate::emt::EmtStallEvent;
use crate::net::{BusId, Phase, SequencePhasor, ThreePhasePhasor};
use crate::{Cx, Error, Result};

/// Where the detailed-side engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransportKind {
    InProcess,
    TcpLoopback,
}

const MSG_HANDSHAKE: u8 = 1;
const MSG_THEVENIN_UPDATE: u8 = 2;
const MSG_INJECTION_FRAME: u8 = 3;
const MSG_EVENT_SIGNAL: u8 = 4;
const MSG_SWITCH_NOTICE: u8 = 5;
const MSG_SHUTDOWN: u8 = 6;

const OP_ENERGIZE: u8 = 0;
const OP_ADVANCE: u8 = 1;
const OP_ADVANCE_FROZEN: u8 = 2;
const OP_IMPEDANCE: u8 = 3;

struct Wire {
    stream: TcpStream,
}

impl Wire {
    fn send(&mut self, kind: u8, payload: &[u8]) -> Result<()> {
        let len = (payload.len() as u32 + 1).to_le_bytes();
        self.stream.write_all(&len)?;
        self.stream.write_all(&[kind])?;
        self.stream.write_all(payload)?;
        self.stream.flush()?;
        Ok(())
    }

    fn recv(&mut self) -> Result<(u8, Vec<u8>)> {
        let mut lenb = [0u8; 4];
        self.stream.read_exact(&mut lenb)?;
        let len = u32::from_le_bytes(lenb) as usize;
        if len == 0 {
            return Err(Error::Transport("zero-length frame".into()));
        }
        let mut buf = vec![0u8; len];
        self.stream.read_exact(&mut buf)?;
        let kind = buf[0];
        buf.remove(0);
        Ok((kind, buf))
    }
}

#[derive(Default)]
struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn cx(&mut self, v: Cx) {
        self.f64(v.re);
        self.f64(v.im);
    }
    fn seq(&mut self, v: &SequencePhasor) {
        self.cx(v.s1);
        self.cx(v.s2);
        self.cx(v.s0);
    }
    fn abc(&mut self, v: &ThreePhasePhasor) {
        self.cx(v.a);
        self.cx(v.b);
        self.cx(v.c);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Dec<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Dec<'a> {
    fn new(b: &'a [u8]) -> Dec<'a> {
        Dec { b, at: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.b.len() {
            return Err(Error::Transport("frame shorter than declared".into()));
        }
        let s = &self.b[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn cx(&mut self) -> Result<Cx> {
        Ok(Cx::new(self.f64()?, self.f64()?))
    }
    fn seq(&mut self) -> Result<SequencePhasor> {
        Ok(SequencePhasor {
            s1: self.cx()?,
            s2: self.cx()?,
            s0: self.cx()?,
        })
    }
    fn abc(&mut self) -> Result<ThreePhasePhasor> {
        Ok(ThreePhasePhasor {
            a: self.cx()?,
            b: self.cx()?,
            c: self.cx()?,
        })
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let s = self.take(n)?;
        String::from_utf8(s.to_vec())
            .map_err(|_| Error::Transport("non-UTF-8 string field".into()))
    }
}

/// The coordinator's handle on the detailed-side engine.
pub enum DetailedLink {
    Local(Box<EmtEngine>),
    Remote(RemoteEngine),
}

pub struct RemoteEngine {
    wire: Wire,
    server: Option<JoinHandle<()>>,
}

impl DetailedLink {
    /// Construct the engine behind the chosen transport. The loopback
    /// variant spawns its own server thread on an ephemeral port and
    /// performs the handshake before returning.
    pub fn start(cfg: &EmtSideConfig, kind: TransportKind) -> Result<DetailedLink> {
        match kind {
            TransportKind::InProcess => {
                Ok(DetailedLink::Local(Box::new(EmtEngine::new(cfg)?)))
            }
            TransportKind::TcpLoopback => {
                let (addr, handle) = spawn_loopback_server(cfg.clone())?;
                let stream = TcpStream::connect(addr)?;
                stream.set_nodelay(true)?;
                let mut wire = Wire { stream };
                let mut e = Enc::default();
                e.f64(cfg.dt);
                e.f64(cfg.f0);
                e.u32(cfg.ports.len() as u32);
                wire.send(MSG_HANDSHAKE, &e.buf)?;
                let (kind, payload) = wire.recv()?;
                check_kind(kind, MSG_HANDSHAKE, &payload)?;
                let mut d = Dec::new(&payload);
                let spc = d.u32()?;
                let want = (1.0 / (cfg.f0 * cfg.dt)).round() as u32;
                if spc != want {
                    return Err(Error::Transport(format!(
                        "handshake mismatch: server runs {spc} samples per \
                         cycle, expected {want}"
                    )));
                }
                Ok(DetailedLink::Remote(RemoteEngine {
                    wire,
                    server: Some(handle),
                }))
            }
        }
    }

    pub fn energize(
        &mut self,
        snapshot: &[(BusId, ThreePhasePhasor)],
        ports: &[PortBoundary],
        capture: bool,
    ) -> Result<(f64, IntervalReply)> {
        match self {
            DetailedLink::Local(eng) => eng.energize(snapshot, ports, capture),
            DetailedLink::Remote(r) => {
                let mut e = Enc::default();
                e.u8(OP_ENERGIZE);
                e.u8(capture as u8);
                e.u32(snapshot.len() as u32);
                for (b, v) in snapshot {
                    e.u32(b.0);
                    e.abc(v);
                }
                e.u32(ports.len() as u32);
                for p in ports {
                    e.u32(p.bus.0);
                    e.cx(p.z1);
                    e.cx(p.z2);
                    e.u8(p.z0.is_some() as u8);
                    if let Some(z0) = p.z0 {
                        e.cx(z0);
                    }
                    e.abc(&p.v_oc);
                }
                r.wire.send(MSG_THEVENIN_UPDATE, &e.buf)?;
                let (kind, payload) = r.wire.recv()?;
                check_kind(kind, MSG_THEVENIN_UPDATE, &payload)?;
                let residual = Dec::new(&payload).f64()?;
                let reply = r.read_frame()?;
                Ok((residual, reply))
            }
        }
    }

    pub fn advance(
        &mut self,
        targets: &[(BusId, ThreePhasePhasor)],
        ramp: f64,
        n: u32,
        capture: bool,
    ) -> Result<IntervalReply> {
        match self {
            DetailedLink::Local(eng) => eng.advance(targets, ramp, n, capture),
            DetailedLink::Remote(r) => {
                let mut e = Enc::default();
                e.u8(OP_ADVANCE);
                e.u8(capture as u8);
                e.f64(ramp);
                e.u32(n);
                e.u32(targets.len() as u32);
                for (b, v) in targets {
                    e.u32(b.0);
                    e.abc(v);
                }
                r.wire.send(MSG_THEVENIN_UPDATE, &e.buf)?;
                r.read_frame()
            }
        }
    }

    pub fn advance_frozen(&mut self, n: u32, capture: bool) -> Result<IntervalReply> {
        match self {
            DetailedLink::Local(eng) => eng.advance_frozen(n, capture),
            DetailedLink::Remote(r) => {
                let mut e = Enc::default();
                e.u8(OP_ADVANCE_FROZEN);
                e.u8(capture as u8);
                e.u32(n);
                r.wire.send(MSG_THEVENIN_UPDATE, &e.buf)?;
                r.read_frame()
            }
        }
    }

    pub fn set_port_impedances(
        &mut self,
        ports: &[(BusId, Cx, Cx, Option<Cx>)],
    ) -> Result<()> {
        match self {
            DetailedLink::Local(eng) => eng.set_port_impedances(ports),
            DetailedLink::Remote(r) => {
                let mut e = Enc::default();
                e.u8(OP_IMPEDANCE);
                e.u32(ports.len() as u32);
                for (b, z1, z2, z0) in ports {
                    e.u32(b.0);
                    e.cx(*z1);
                    e.cx(*z2);
                    e.u8(z0.is_some() as u8);
                    if let Some(z0) = z0 {
                        e.cx(*z0);
                    }
                }
                r.wire.send(MSG_THEVENIN_UPDATE, &e.buf)?;
                let (kind, payload) = r.wire.recv()?;
                check_kind(kind, MSG_THEVENIN_UPDATE, &payload)?;
                Ok(())
            }
        }
    }

    /// Tell the engine the coordinator is leaving the co-simulation stage.
    pub fn switch_notice(&mut self) -> Result<()> {
        match self {
            DetailedLink::Local(eng) => {
                eng.halt();
                Ok(())
            }
            DetailedLink::Remote(r) => {
                r.wire.send(MSG_SWITCH_NOTICE, &[])?;
                let (kind, payload) = r.wire.recv()?;
                check_kind(kind, MSG_SWITCH_NOTICE, &payload)?;
                Ok(())
            }
        }
    }

    pub fn shutdown(self) -> Result<()> {
        match self {
            DetailedLink::Local(_) => Ok(()),
            DetailedLink::Remote(mut r) => {
                r.wire.send(MSG_SHUTDOWN, &[])?;
                let (kind, payload) = r.wire.recv()?;
                check_kind(kind, MSG_SHUTDOWN, &payload)?;
                if let Some(h) = r.server.take() {
                    h.join()
                        .map_err(|_| Error::Transport("server thread panicked".into()))?;
                }
                Ok(())
            }
        }
    }
}

impl RemoteEngine {
    fn read_frame(&mut self) -> Result<IntervalReply> {
        let (kind, payload) = self.wire.recv()?;
        check_kind(kind, MSG_INJECTION_FRAME, &payload)?;
        let mut d = Dec::new(&payload);
        let t = d.f64()?;
        let n_inj = d.u32()? as usize;
        let mut injections = Vec::with_capacity(n_inj);
        for _ in 0..n_inj {
            let b = BusId(d.u32()?);
            injections.push((b, d.seq()?));
        }
        let n_mon = d.u32()? as usize;
        let mut monitored = Vec::with_capacity(n_mon);
        for _ in 0..n_mon {
            let b = BusId(d.u32()?);
            monitored.push((b, d.abc()?));
        }
        let n_status = d.u32()? as usize;
        let mut motor_status = Vec::with_capacity(n_status);
        for _ in 0..n_status {
            let id = d.str()?;
            motor_status.push((id, d.u8()? != 0));
        }
        let n_wave = d.u32()? as usize;
        let mut waveforms = Vec::with_capacity(n_wave);
        for _ in 0..n_wave {
            let b = BusId(d.u32()?);
            let len = d.u32()? as usize;
            let mut tri: [Vec<f64>; 3] = Default::default();
            for ph in &mut tri {
                let mut v = Vec::with_capacity(len);
                for _ in 0..len {
                    v.push(d.f64()?);
                }
                *ph = v;
            }
            waveforms.push((b, tri));
        }
        let n_stalls = d.u32()? as usize;
        let mut stalls = Vec::with_capacity(n_stalls);
        for _ in 0..n_stalls {
            let (kind, payload) = self.wire.recv()?;
            check_kind(kind, MSG_EVENT_SIGNAL, &payload)?;
            let mut d = Dec::new(&payload);
            stalls.push(EmtStallEvent {
                t: d.f64()?,
                motor: d.str()?,
                bus: BusId(d.u32()?),
                phase: decode_phase(d.u8()?)?,
            });
        }
        Ok(IntervalReply {
            t,
            injections,
            monitored,
            stalls,
            motor_status,
            waveforms,
        })
    }
}

/// A server-side error travels back as a SHUTDOWN frame carrying the
/// message, so the client sees the cause instead of a dropped connection.
fn check_kind(kind: u8, want: u8, payload: &[u8]) -> Result<()> {
    if kind == want {
        return Ok(());
    }
    if kind == MSG_SHUTDOWN {
        let msg = Dec::new(payload)
            .str()
            .unwrap_or_else(|_| "server closed the session".into());
        return Err(Error::Transport(format!("engine server: {msg}")));
    }
    Err(Error::Transport(format!(
        "unexpected message kind {kind}, wanted {want}"
    )))
}

fn encode_phase(p: Phase) -> u8 {
    p.index() as u8
}

fn decode_phase(b: u8) -> Result<Phase> {
    Phase::ALL
        .get(b as usize)
        .copied()
        .ok_or_else(|| Error::Transport(format!("phase code {b} out of range")))
}

/// Host an engine on an ephemeral loopback port. The thread serves exactly
/// one connection and exits after SHUTDOWN (or on a dead socket).
pub fn spawn_loopback_server(
    cfg: EmtSideConfig,
) -> Result<(SocketAddr, JoinHandle<()>)> {
    let listener = TcpListener::bind(("127.0.0.1", 0))?;
    let addr = listener.local_addr()?;
    let handle = std::thread::Builder::new()
        .name("emt-engine-server".into())
        .spawn(move || {
            // A dropped client ends the session; nothing to report to.
            let _ = serve(listener, cfg);
        })?;
    Ok((addr, handle))
}

fn serve(listener: TcpListener, cfg: EmtSideConfig) -> Result<()> {
    let (stream, _) = listener.accept()?;
    stream.set_nodelay(true)?;
    let mut wire = Wire { stream };
    let mut engine: Option<EmtEngine> = None;
    loop {
        let (kind, payload) = wire.recv()?;
        match kind {
            MSG_HANDSHAKE => {
                let mut d = Dec::new(&payload);
                let dt = d.f64()?;
                let f0 = d.f64()?;
                let n_ports = d.u32()? as usize;
                if dt != cfg.dt || f0 != cfg.f0 || n_ports != cfg.ports.len() {
                    fail(&mut wire, "handshake does not match engine definition")?;
                    continue;
                }
                match EmtEngine::new(&cfg) {
                    Ok(eng) => {
                        engine = Some(eng);
                        let mut e = Enc::default();
                        e.u32((1.0 / (cfg.f0 * cfg.dt)).round() as u32);
                        wire.send(MSG_HANDSHAKE, &e.buf)?;
                    }
                    Err(err) => fail(&mut wire, &err.to_string())?,
                }
            }
            MSG_THEVENIN_UPDATE => {
                let Some(eng) = engine.as_mut() else {
                    fail(&mut wire, "no handshake yet")?;
                    continue;
                };
                if let Err(err) = handle_update(&mut wire, eng, &payload) {
                    fail(&mut wire, &err.to_string())?;
                }
            }
            MSG_SWITCH_NOTICE => {
                if let Some(eng) = engine.as_mut() {
                    eng.halt();
                }
                wire.send(MSG_SWITCH_NOTICE, &[])?;
            }
            MSG_SHUTDOWN => {
                wire.send(MSG_SHUTDOWN, &[])?;
                return Ok(());
            }
            other => {
                fail(&mut wire, &format!("unknown message kind {other}"))?;
            }
        }
    }
}

fn fail(wire: &mut Wire, msg: &str) -> Result<()> {
    let mut e = Enc::default();
    e.str(msg);
    wire.send(MSG_SHUTDOWN, &e.buf)
}

fn handle_update(wire: &mut Wire, eng: &mut EmtEngine, payload: &[u8]) -> Result<()> {
    let mut d = Dec::new(payload);
    match d.u8()? {
        OP_ENERGIZE => {
            let capture = d.u8()? != 0;
            let n_snap = d.u32()? as usize;
            let mut snapshot = Vec::with_capacity(n_snap);
            for _ in 0..n_snap {
                let b = BusId(d.u32()?);
                snapshot.push((b, d.abc()?));
            }
            let n_ports = d.u32()? as usize;
            let mut ports = Vec::with_capacity(n_ports);
            for _ in 0..n_ports {
                let bus = BusId(d.u32()?);
                let z1 = d.cx()?;
                let z2 = d.cx()?;
                let z0 = if d.u8()? != 0 { Some(d.cx()?) } else { None };
                let v_oc = d.abc()?;
                ports.push(PortBoundary {
                    bus,
                    z1,
                    z2,
                    z0,
                    v_oc,
                });
            }
            let (residual, reply) = eng.energize(&snapshot, &ports, capture)?;
            let mut e = Enc::default();
            e.f64(residual);
            wire.send(MSG_THEVENIN_UPDATE, &e.buf)?;
            send_frame(wire, &reply)
        }
        OP_ADVANCE => {
            let capture = d.u8()? != 0;
            let ramp = d.f64()?;
            let n = d.u32()?;
            let n_targets = d.u32()? as usize;
            let mut targets = Vec::with_capacity(n_targets);
            for _ in 0..n_targets {
                let b = BusId(d.u32()?);
                targets.push((b, d.abc()?));
            }
            let reply = eng.advance(&targets, ramp, n, capture)?;
            send_frame(wire, &reply)
        }
        OP_ADVANCE_FROZEN => {
            let capture = d.u8()? != 0;
            let n = d.u32()?;
            let reply = eng.advance_frozen(n, capture)?;
            send_frame(wire, &reply)
        }
        OP_IMPEDANCE => {
            let n_ports = d.u32()? as usize;
            let mut ports = Vec::with_capacity(n_ports);
            for _ in 0..n_ports {
                let bus = BusId(d.u32()?);
                let z1 = d.cx()?;
                let z2 = d.cx()?;
                let z0 = if d.u8()? != 0 { Some(d.cx()?) } else { None };
                ports.push((bus, z1, z2, z0));
            }
            eng.set_port_impedances(&ports)?;
            wire.send(MSG_THEVENIN_UPDATE, &[])
        }
        other => Err(Error::Transport(format!("unknown update op {other}"))),
    }
}

fn send_frame(wire: &mut Wire, reply: &IntervalReply) -> Result<()> {
    let mut e = Enc::default();
    e.f64(reply.t);
    e.u32(reply.injections.len() as u32);
    for (b, s) in &reply.injections {
        e.u32(b.0);
        e.seq(s);
    }
    e.u32(reply.monitored.len() as u32);
    for (b, v) in &reply.monitored {
        e.u32(b.0);
        e.abc(v);
    }
    e.u32(reply.motor_status.len() as u32);
    for (id, running) in &reply.motor_status {
        e.str(id);
        e.u8(*running as u8);
    }
    e.u32(reply.waveforms.len() as u32);
    for (b, tri) in &reply.waveforms {
        e.u32(b.0);
        e.u32(tri[0].len() as u32);
        for ph in tri {
            for s in ph {
                e.f64(*s);
            }
        }
    }
    e.u32(reply.stalls.len() as u32);
    wire.send(MSG_INJECTION_FRAME, &e.buf)?;
    for s in &reply.stalls {
        let mut e = Enc::default();
        e.f64(s.t);
        e.str(&s.motor);
        e.u32(s.bus.0);
        e.u8(encode_phase(s.phase));
        wire.send(MSG_EVENT_SIGNAL, &e.buf)?;
    }
    Ok(())
}
