"""Certificate material for the gateway and the TAK stub.

``provision`` writes a throwaway EC P-256 certificate authority, one server
certificate and a pool of client certificates into a directory. Both sides
build their ``ssl.SSLContext`` from that directory and require mutual
authentication.
"""

from __future__ import annotations

import datetime as dt
import ipaddress
import ssl
from dataclasses import dataclass
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

CA_NAME = "ca"
SERVER_NAME = "server"


@dataclass(frozen=True)
class Credential:
    cert_id: str
    cert_path: Path
    key_path: Path


@dataclass(frozen=True)
class Provisioned:
    directory: Path
    ca_path: Path
    server: Credential
    clients: list[Credential]


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _write(directory: Path, stem: str, key, cert: x509.Certificate) -> Credential:
    key_path = directory / f"{stem}.key"
    cert_path = directory / f"{stem}.pem"
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    key_path.chmod(0o600)
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    return Credential(stem, cert_path, key_path)


def _issue(ca_key, ca_name, cn: str, *, server: bool, hosts: tuple[str, ...], days: int):
    key = ec.generate_private_key(ec.SECP256R1())
    now = dt.datetime.now(dt.timezone.utc)
    usage = ExtendedKeyUsageOID.SERVER_AUTH if server else ExtendedKeyUsageOID.CLIENT_AUTH
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(ca_name)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(x509.ExtendedKeyUsage([usage]), critical=False)
    )
    if server:
        alt = []
        for h in hosts:
            try:
                alt.append(x509.IPAddress(ipaddress.ip_address(h)))
            except ValueError:
                alt.append(x509.DNSName(h))
        builder = builder.add_extension(x509.SubjectAlternativeName(alt), critical=False)
    return key, builder.sign(ca_key, hashes.SHA256())


def provision(
    directory: str | Path,
    clients: int = 32,
    hosts: tuple[str, ...] = ("localhost", "127.0.0.1"),
    days: int = 365,
) -> Provisioned:
    """Create a CA, a server certificate and ``clients`` client certificates."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ca_key = ec.generate_private_key(ec.SECP256R1())
    ca_name = _name("sa-gateway test CA")
    now = dt.datetime.now(dt.timezone.utc)
    ca_cert = (
        x509.CertificateBuilder()
        .subject_name(ca_name)
        .issuer_name(ca_name)
        .public_key(ca_key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, content_commitment=False, key_encipherment=False,
                data_encipherment=False, key_agreement=False, key_cert_sign=True,
                crl_sign=True, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .sign(ca_key, hashes.SHA256())
    )
    ca = _write(out, CA_NAME, ca_key, ca_cert)
    server = _write(out, SERVER_NAME, *_issue(ca_key, ca_name, SERVER_NAME, server=True, hosts=hosts, days=days))
    creds = []
    for i in range(clients):
        cn = f"client-{i:02d}"
        creds.append(_write(out, cn, *_issue(ca_key, ca_name, cn, server=False, hosts=(), days=days)))
    return Provisioned(out, ca.cert_path, server, creds)


def load(directory: str | Path) -> Provisioned:
    """Re-read material written by :func:`provision`."""
    d = Path(directory)
    ca = d / f"{CA_NAME}.pem"
    if not ca.is_file():
        raise FileNotFoundError(f"no {ca.name} in {d}")
    server = Credential(SERVER_NAME, d / f"{SERVER_NAME}.pem", d / f"{SERVER_NAME}.key")
    clients = [
        Credential(p.stem, p, p.with_suffix(".key"))
        for p in sorted(d.glob("client-*.pem"))
        if p.with_suffix(".key").is_file()
    ]
    return Provisioned(d, ca, server, clients)


def server_context(p: Provisioned) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(p.server.cert_path, p.server.key_path)
    ctx.load_verify_locations(p.ca_path)
    ctx.verify_mode = ssl.CERT_REQUIRED
    return ctx


def client_context(p: Provisioned, credential: Credential | None) -> ssl.SSLContext:
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_verify_locations(p.ca_path)
    if credential is not None:
        ctx.load_cert_chain(credential.cert_path, credential.key_path)
    return ctx
