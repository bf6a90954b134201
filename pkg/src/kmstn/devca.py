"""Deployment-local certificate authority for the mTLS mesh.

Every KMSTN, QKD pair and SAE gets one P-256 certificate usable both as a TLS
server and as a TLS client, signed by a CA that only this deployment trusts.
"""
from __future__ import annotations

import datetime as dt
import ipaddress
from pathlib import Path
from typing import Iterable, Optional, Tuple

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID

from .config import ConfigBundle

VALID_DAYS = 365


def _name(cn: str) -> x509.Name:
    return x509.Name([x509.NameAttribute(NameOID.ORGANIZATION_NAME, "kmstn dev mesh"),
                      x509.NameAttribute(NameOID.COMMON_NAME, cn)])


def _write(path: Path, key, cert: x509.Certificate) -> Tuple[Path, Path]:
    key_path = path.with_suffix(".key")
    cert_path = path.with_suffix(".crt")
    key_path.write_bytes(key.private_bytes(serialization.Encoding.PEM,
                                           serialization.PrivateFormat.PKCS8,
                                           serialization.NoEncryption()))
    key_path.chmod(0o600)
    cert_path.write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    return cert_path, key_path


class DevCA:
    def __init__(self, key: ec.EllipticCurvePrivateKey, cert: x509.Certificate):
        self.key = key
        self.cert = cert

    @classmethod
    def create(cls, cn: str = "kmstn dev CA") -> "DevCA":
        key = ec.generate_private_key(ec.SECP256R1())
        now = dt.datetime.now(dt.timezone.utc)
        cert = (x509.CertificateBuilder()
                .subject_name(_name(cn)).issuer_name(_name(cn))
                .public_key(key.public_key())
                .serial_number(x509.random_serial_number())
                .not_valid_before(now - dt.timedelta(minutes=5))
                .not_valid_after(now + dt.timedelta(days=VALID_DAYS))
                .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
                .add_extension(x509.KeyUsage(digital_signature=True, key_cert_sign=True,
                                             crl_sign=True, content_commitment=False,
                                             key_encipherment=False, data_encipherment=False,
                                             key_agreement=False, encipher_only=False,
                                             decipher_only=False), critical=True)
                .sign(key, hashes.SHA256()))
        return cls(key, cert)

    def issue(self, cn: str, hosts: Iterable[str] = ("127.0.0.1", "localhost")):
        key = ec.generate_private_key(ec.SECP256R1())
        sans = []
        for h in hosts:
            try:
                sans.append(x509.IPAddress(ipaddress.ip_address(h)))
            except ValueError:
                sans.append(x509.DNSName(h))
        now = dt.datetime.now(dt.timezone.utc)
        cert = (x509.CertificateBuilder()
                .subject_name(_name(cn)).issuer_name(self.cert.subject)
                .public_key(key.public_key())
                .serial_number(x509.random_serial_number())
                .not_valid_before(now - dt.timedelta(minutes=5))
                .not_valid_after(now + dt.timedelta(days=VALID_DAYS))
                .add_extension(x509.SubjectAlternativeName(sans), critical=False)
                .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
                .add_extension(x509.ExtendedKeyUsage([ExtendedKeyUsageOID.SERVER_AUTH,
                                                      ExtendedKeyUsageOID.CLIENT_AUTH]),
                               critical=False)
                .sign(self.key, hashes.SHA256()))
        return key, cert

    def write_ca(self, out_dir: Path) -> Path:
        return _write(Path(out_dir) / "ca", self.key, self.cert)[0]


def issue_mesh_pki(bundle: ConfigBundle, out_dir, ca: Optional[DevCA] = None) -> ConfigBundle:
    """Write certificates for every entity of ``bundle`` and switch it to mTLS."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ca = ca or DevCA.create()
    ca_path = ca.write_ca(out)
    hosts = {"127.0.0.1", "localhost"}
    for doc in bundle.qkd_pairs + bundle.kmstns:
        hosts.add(doc["host"])

    def assign(doc: dict, cn: str):
        key, cert = ca.issue(cn, sorted(hosts))
        cert_path, key_path = _write(out / cn, key, cert)
        doc["tls"] = {"cert": str(cert_path), "key": str(key_path)}

    for doc in bundle.qkd_pairs:
        assign(doc, doc["pair_id"])
    for doc in bundle.kmstns:
        assign(doc, doc["kmstn_id"])
    for doc in bundle.saes:
        assign(doc, doc["sae_id"])
        doc["tls"]["ca"] = str(ca_path)
        if doc.get("kmstn_url", "").startswith("http://"):
            doc["kmstn_url"] = "https://" + doc["kmstn_url"][len("http://"):]
    bundle.mesh = {**bundle.mesh, "insecure_sim": False, "tls": {"ca": str(ca_path)}}
    return bundle
