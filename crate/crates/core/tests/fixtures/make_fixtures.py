"""Writes the wire-protocol golden files with struct.pack, independent of the Rust encoder."""
import struct

HEAD = b"CEMA" + bytes([1])


def reals(xs):
    return struct.pack("<I", len(xs)) + b"".join(struct.pack("<f", x) for x in xs)


FIXTURES = {
    "client_hello.bin": HEAD + bytes([1]) + struct.pack("<I", 7) + bytes(range(1, 9)),
    "server_hello.bin": HEAD + bytes([2]) + bytes([1]) + struct.pack("<Q", 42),
    "server_hello_reject.bin": HEAD + bytes([2]) + bytes([0]) + struct.pack("<Q", 0),
    "sample_batch.bin": HEAD + bytes([3]) + struct.pack("<QI", 3, 2)
    + struct.pack("<Q", 10) + reals([1.0, -2.5, 0.0])
    + struct.pack("<Q", 11) + reals([]),
    "param_update.bin": HEAD + bytes([4]) + struct.pack("<QI", 5, 2)
    + struct.pack("<H", 0) + reals([1.0, 0.5]) + reals([0.0, -0.25])
    + struct.pack("<H", 1) + reals([2.0]) + reals([0.125]),
    "ack.bin": HEAD + bytes([5]) + struct.pack("<Q", 9),
}

if __name__ == "__main__":
    for name, data in FIXTURES.items():
        with open(name, "wb") as f:
            f.write(data)
