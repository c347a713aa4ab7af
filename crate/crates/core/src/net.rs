//! Socket helpers shared by the edge transport and the cloud server.

use std::io::{self, Read};
use std::net::TcpStream;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Read timeout used to poll stop flags on otherwise blocking sockets.
pub(crate) const POLL: Duration = Duration::from_millis(50);

/// Blocking reads on a socket with a short timeout, retried until `stop` is
/// raised. Timeouts never surface mid-frame.
pub(crate) struct StopAwareReader {
    pub(crate) stream: TcpStream,
    pub(crate) stop: Arc<AtomicBool>,
}

impl Read for StopAwareReader {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        loop {
            match self.stream.read(buf) {
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    if self.stop.load(Ordering::SeqCst) {
                        return Err(io::Error::new(io::ErrorKind::Interrupted, "stopping"));
                    }
                }
                other => return other,
            }
        }
    }
}
