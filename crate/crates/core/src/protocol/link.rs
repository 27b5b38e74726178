//! Ordered, line-framed transports between harness and worker.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{channel, Receiver, Sender};

use thiserror::Error;

use super::{decode_message, encode_message, DecodeError, Message};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("transport i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer closed the channel")]
    Closed,
    #[error("undecodable line: {0}")]
    Decode(#[from] DecodeError),
}

pub trait MessageSink: Send {
    fn send(&mut self, msg: &Message) -> Result<(), LinkError> {
        self.send_line(&encode_message(msg))
    }

    /// Writes one pre-encoded line, which must end with `\n`.
    fn send_line(&mut self, line: &str) -> Result<(), LinkError>;
}

pub trait MessageSource: Send {
    /// Blocks for the next message. End of stream is [`LinkError::Closed`].
    fn recv(&mut self) -> Result<Message, LinkError>;
}

/// Writes lines to any byte sink, flushing after each message.
pub struct LineSink<W> {
    inner: W,
}

impl<W: Write + Send> LineSink<W> {
    pub fn new(inner: W) -> Self {
        LineSink { inner }
    }
}

impl<W: Write + Send> MessageSink for LineSink<W> {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        self.inner.write_all(line.as_bytes())?;
        if !line.ends_with('\n') {
            self.inner.write_all(b"\n")?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

pub struct LineSource<R> {
    inner: R,
    buf: String,
}

impl<R: BufRead + Send> LineSource<R> {
    pub fn new(inner: R) -> Self {
        LineSource {
            inner,
            buf: String::new(),
        }
    }
}

impl<R: BufRead + Send> MessageSource for LineSource<R> {
    fn recv(&mut self) -> Result<Message, LinkError> {
        self.buf.clear();
        if self.inner.read_line(&mut self.buf)? == 0 {
            return Err(LinkError::Closed);
        }
        Ok(decode_message(&self.buf)?)
    }
}

struct ChannelSink(Sender<String>);

impl MessageSink for ChannelSink {
    fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        self.0.send(line.to_string()).map_err(|_| LinkError::Closed)
    }
}

struct ChannelSource(Receiver<String>);

impl MessageSource for ChannelSource {
    fn recv(&mut self) -> Result<Message, LinkError> {
        let line = self.0.recv().map_err(|_| LinkError::Closed)?;
        Ok(decode_message(&line)?)
    }
}

/// One endpoint of a bidirectional message channel.
pub struct WorkerLink {
    sink: Box<dyn MessageSink>,
    source: Box<dyn MessageSource>,
}

impl WorkerLink {
    pub fn new(sink: Box<dyn MessageSink>, source: Box<dyn MessageSource>) -> Self {
        WorkerLink { sink, source }
    }

    pub fn from_io<R, W>(reader: R, writer: W) -> Self
    where
        R: BufRead + Send + 'static,
        W: Write + Send + 'static,
    {
        WorkerLink::new(
            Box::new(LineSink::new(writer)),
            Box::new(LineSource::new(reader)),
        )
    }

    pub fn send(&mut self, msg: &Message) -> Result<(), LinkError> {
        self.sink.send(msg)
    }

    pub fn send_line(&mut self, line: &str) -> Result<(), LinkError> {
        self.sink.send_line(line)
    }

    pub fn recv(&mut self) -> Result<Message, LinkError> {
        self.source.recv()
    }

    pub fn split(self) -> (Box<dyn MessageSink>, Box<dyn MessageSource>) {
        (self.sink, self.source)
    }
}

/// In-memory line channel. Messages still go through the wire encoding.
pub fn duplex() -> (WorkerLink, WorkerLink) {
    let (to_worker, worker_rx) = channel();
    let (to_harness, harness_rx) = channel();
    let harness = WorkerLink::new(
        Box::new(ChannelSink(to_worker)),
        Box::new(ChannelSource(harness_rx)),
    );
    let worker = WorkerLink::new(
        Box::new(ChannelSink(to_harness)),
        Box::new(ChannelSource(worker_rx)),
    );
    (harness, worker)
}

/// Runs `command` through `sh -c` with piped stdin/stdout. Stderr is
/// inherited so worker diagnostics stay visible.
pub fn spawn_worker(command: &str) -> Result<(WorkerLink, Child), LinkError> {
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(command)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()?;
    let stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");
    Ok((WorkerLink::from_io(BufReader::new(stdout), stdin), child))
}

/// Connects to a worker listening on a local TCP socket. Framing is the
/// same as over stdio.
pub fn connect_tcp(addr: &str) -> Result<WorkerLink, LinkError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(WorkerLink::from_io(reader, stream))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Frame, QueryEncoded};
    use std::io::Cursor;

    #[test]
    fn duplex_carries_messages_both_ways() {
        let (mut h, mut w) = duplex();
        h.send(&Message::Shutdown).unwrap();
        assert_eq!(w.recv().unwrap(), Message::Shutdown);
        let reply = Message::QueryEncoded(QueryEncoded {
            query_id: "q".into(),
            t1: 0.5,
        });
        w.send(&reply).unwrap();
        assert_eq!(h.recv().unwrap(), reply);
        drop(w);
        assert!(matches!(h.recv(), Err(LinkError::Closed)));
    }

    #[test]
    fn line_source_reports_eof_and_bad_lines() {
        let input = "{\"type\":\"shutdown\"}\nnot json\n";
        let mut src = LineSource::new(Cursor::new(input.as_bytes().to_vec()));
        assert_eq!(src.recv().unwrap(), Message::Shutdown);
        assert!(matches!(src.recv(), Err(LinkError::Decode(_))));
        assert!(matches!(src.recv(), Err(LinkError::Closed)));
    }

    #[test]
    fn line_sink_writes_wire_format() {
        let mut out = Vec::new();
        {
            let mut sink = LineSink::new(&mut out);
            sink.send(&Message::Frame(Frame {
                frame_id: 1,
                t_emit: 0.5,
                payload_ref: "p".into(),
            }))
            .unwrap();
        }
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "{\"type\":\"frame\",\"frame_id\":1,\"t_emit\":0.5,\"payload_ref\":\"p\"}\n"
        );
    }
}
