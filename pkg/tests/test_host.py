"""The request pipeline end to end: routing, fault attribution, auth,
message security, lifecycle and robustness."""

import concurrent.futures
import dataclasses
import random
import threading
import time

import pytest

from mobilehost.canonical import body_canonical, canonicalize
from mobilehost.errors import CorruptSnapshot, DuplicateService, HandlerError, NotFound
from mobilehost.host import (
    AuthHeader,
    Host,
    HostConfig,
    SIGNATURE_HEADER,
    attach_signature,
    auth_header_xml,
    encrypt_request,
    parse_signature_header,
    verify_envelope_signature,
)
from mobilehost.notes import NotesHandler, notes_descriptor
from mobilehost.registry import make_user, password_proof
from mobilehost.security import generate_keypair, issue_certificate, render_certificate_text, verify_signature
from mobilehost.service import MethodSignature, ParameterSpec, ServiceDescriptor
from mobilehost.soap import (
    QName,
    SoapCall,
    SoapEnvelope,
    SoapFault,
    TypedValue,
    XsdType,
    make_header_entry,
    parse_envelope,
    serialize_envelope,
)
from mobilehost.transport import BindingConfig, InboundRequest, classify_request

from conftest import make_host
from strategies import auth_entry


def soap_request(payload: bytes, path: str = "", kind: str = "loopback") -> InboundRequest:
    return InboundRequest(
        transportKind=kind,
        peer="test",
        path=path,
        headers=None,
        payload=payload,
        classification=classify_request(payload),
    )


def call_envelope(method="obterNotas", params=(("codAluno", "A001"), ("codDisciplina", "D002")),
                  namespace="http://localhost:5000/CadastroEscolar.jws",
                  headers=(), types=None) -> bytes:
    typed = tuple(
        (name, TypedValue.parse((types or {}).get(name, XsdType.STRING), value))
        for name, value in params
    )
    env = SoapEnvelope(
        body=SoapCall(operation=QName(method, namespace), params=typed),
        headerEntries=tuple(headers),
    )
    return serialize_envelope(env)


class CrashHandler:
    def executeMethod(self, methodName, args):
        raise HandlerError("deliberate failure")


class WrongTypeHandler:
    def executeMethod(self, methodName, args):
        return TypedValue.of(XsdType.INT, 42)


def simple_descriptor(name="Echoish", secure=False, exclusive=False, method="shout"):
    return ServiceDescriptor(
        serviceName=name,
        namespaceUri=f"http://localhost:5000/{name}.jws",
        endpointPath=f"/{name}.jws",
        responseNamespaceUri=f"http://localhost:5000/{name}.jws",
        methods=(
            MethodSignature(method, (ParameterSpec("text", XsdType.STRING),), XsdType.STRING),
        ),
        securityEnabled=secure,
        exclusiveExecution=exclusive,
    )


class UpperHandler:
    def executeMethod(self, methodName, args):
        return TypedValue.of(XsdType.STRING, args[0].value.upper())


class TestPipelineHappyPath:
    def test_demo_round_trip_equals_golden_response(self, demo_host, fig13_bytes, fig14_bytes):
        resp = demo_host.handle_request(soap_request(fig13_bytes))
        assert resp.status == 200
        assert canonicalize(resp.body) == canonicalize(fig14_bytes)

    def test_routing_by_explicit_path(self, demo_host, fig13_bytes):
        resp = demo_host.handle_request(
            soap_request(fig13_bytes, path="/CadastroEscolar.jws")
        )
        assert parse_envelope(resp.body).body.result.value.startswith("#A001")

    def test_routing_falls_back_to_call_namespace(self, demo_host, fig13_bytes):
        resp = demo_host.handle_request(soap_request(fig13_bytes, path=""))
        assert resp.status == 200

    def test_empty_result_is_single_hash(self, demo_host):
        payload = call_envelope(params=(("codAluno", "ZZZ"), ("codDisciplina", "D002")))
        resp = demo_host.handle_request(soap_request(payload))
        assert parse_envelope(resp.body).body.result.value == "#"


def fault_of(resp) -> SoapFault:
    body = parse_envelope(resp.body).body
    assert isinstance(body, SoapFault), f"expected fault, got {body}"
    return body


class TestFaultAttribution:
    def test_unknown_method_is_client_fault(self, demo_host):
        resp = demo_host.handle_request(soap_request(call_envelope(method="nope", params=())))
        assert resp.status == 500
        assert fault_of(resp).faultcode == "Client"

    def test_arity_low_is_client_fault(self, demo_host):
        payload = call_envelope(params=(("codAluno", "A001"),))
        assert fault_of(demo_host.handle_request(soap_request(payload))).faultcode == "Client"

    def test_arity_high_is_client_fault(self, demo_host):
        payload = call_envelope(
            params=(("codAluno", "A001"), ("codDisciplina", "D002"), ("extra", "x"))
        )
        assert fault_of(demo_host.handle_request(soap_request(payload))).faultcode == "Client"

    def test_wrong_type_is_client_fault(self, demo_host):
        payload = call_envelope(
            params=(("codAluno", "7"), ("codDisciplina", "D002")),
            types={"codAluno": XsdType.INT},
        )
        fault = fault_of(demo_host.handle_request(soap_request(payload)))
        assert fault.faultcode == "Client"
        assert "codAluno" in fault.faultstring

    def test_wrong_name_is_client_fault(self, demo_host):
        payload = call_envelope(params=(("student", "A001"), ("codDisciplina", "D002")))
        assert fault_of(demo_host.handle_request(soap_request(payload))).faultcode == "Client"

    def test_handler_exception_is_server_fault(self, tmp_path):
        host = make_host(tmp_path, with_demo=False)
        host.create_service(simple_descriptor(), CrashHandler())
        payload = call_envelope(
            method="shout", params=(("text", "x"),),
            namespace="http://localhost:5000/Echoish.jws",
        )
        resp = host.handle_request(soap_request(payload))
        fault = fault_of(resp)
        assert fault.faultcode == "Server"
        assert "deliberate failure" in (fault.detail or "")

    def test_host_survives_handler_crash(self, tmp_path, fig13_bytes):
        host = make_host(tmp_path)
        host.create_service(simple_descriptor(), CrashHandler())
        bad = call_envelope(method="shout", params=(("text", "x"),),
                            namespace="http://localhost:5000/Echoish.jws")
        fault_of(host.handle_request(soap_request(bad)))
        good = host.handle_request(soap_request(fig13_bytes))
        assert good.status == 200

    def test_return_type_violation_is_server_fault(self, tmp_path):
        host = make_host(tmp_path, with_demo=False)
        host.create_service(simple_descriptor(), WrongTypeHandler())
        payload = call_envelope(method="shout", params=(("text", "x"),),
                                namespace="http://localhost:5000/Echoish.jws")
        assert fault_of(host.handle_request(soap_request(payload))).faultcode == "Server"

    def test_unknown_path_is_client_fault(self, demo_host):
        payload = call_envelope(namespace="http://localhost:5000/Nowhere.jws")
        fault = fault_of(demo_host.handle_request(soap_request(payload)))
        assert fault.faultcode == "Client"
        assert "unknown service" in fault.faultstring

    def test_unparseable_xml_is_client_fault(self, demo_host):
        resp = demo_host.handle_request(soap_request(SOAPISH))
        assert fault_of(resp).faultcode == "Client"

    def test_response_body_as_request_is_client_fault(self, demo_host, fig14_bytes):
        resp = demo_host.handle_request(soap_request(fig14_bytes))
        assert fault_of(resp).faultcode == "Client"

    def test_missing_handler_is_server_fault(self, tmp_path):
        host = make_host(tmp_path)
        host.shutdown()
        revived = make_host(tmp_path, with_demo=False)
        payload = call_envelope()
        assert fault_of(revived.handle_request(soap_request(payload))).faultcode == "Server"


SOAPISH = (
    b'<e:Envelope xmlns:e="http://schemas.xmlsoap.org/soap/envelope/">'
    b"<e:Body></e:Body></e:Envelope>"
)


class TestAuth:
    @pytest.fixture
    def auth_host(self, tmp_path):
        host = make_host(tmp_path, authRequired=True)
        host.registry.add_user(
            make_user("aluno1", "segredo", "dev1", {"CadastroEscolar"})
        )
        host.registry.add_user(make_user("other", "pw", "dev2", {"SomethingElse"}))
        return host

    def payload(self, login=None, password=None):
        headers = ()
        if login is not None:
            headers = (auth_entry(login, password_proof(password)),)
        return call_envelope(headers=headers)

    def test_valid_credentials_allowed(self, auth_host):
        resp = auth_host.handle_request(soap_request(self.payload("aluno1", "segredo")))
        assert resp.status == 200

    def test_missing_auth_header_denied(self, auth_host):
        fault = fault_of(auth_host.handle_request(soap_request(self.payload())))
        assert fault.faultcode == "Client"
        assert fault.faultstring == "access denied"

    def test_wrong_password_denied(self, auth_host):
        fault = fault_of(
            auth_host.handle_request(soap_request(self.payload("aluno1", "wrong")))
        )
        assert fault.faultstring == "access denied"

    def test_unpermitted_service_denied(self, auth_host):
        fault = fault_of(
            auth_host.handle_request(soap_request(self.payload("other", "pw")))
        )
        assert fault.faultstring == "access denied"

    def test_denied_outcome_logged(self, auth_host):
        auth_host.handle_request(soap_request(self.payload("aluno1", "wrong")))
        assert auth_host.registry.log_entries()[-1].outcome == "denied"

    def test_no_auth_needed_when_disabled(self, demo_host, fig13_bytes):
        assert demo_host.handle_request(soap_request(fig13_bytes)).status == 200


class TestSecurityGating:
    @pytest.fixture
    def secure_host(self, tmp_path):
        return make_host(tmp_path, secure_demo=True)

    def test_secure_response_carries_verifying_signature(self, secure_host, fig13_bytes):
        resp = secure_host.handle_request(soap_request(fig13_bytes))
        assert resp.status == 200
        cert = secure_host.service_certificate("CadastroEscolar")
        assert verify_envelope_signature(resp.body, cert) is True

    def test_insecure_response_has_no_signature(self, demo_host, fig13_bytes):
        resp = demo_host.handle_request(soap_request(fig13_bytes))
        env = parse_envelope(resp.body)
        assert env.header(SIGNATURE_HEADER) is None

    def test_secure_fault_is_signed_too(self, secure_host):
        resp = secure_host.handle_request(soap_request(call_envelope(method="nope", params=())))
        cert = secure_host.service_certificate("CadastroEscolar")
        assert verify_envelope_signature(resp.body, cert) is True

    def test_tampered_body_fails_verification(self, secure_host, fig13_bytes):
        resp = secure_host.handle_request(soap_request(fig13_bytes))
        tampered = resp.body.replace(b"NOTE 1;;100", b"NOTE 1;;999")
        cert = secure_host.service_certificate("CadastroEscolar")
        assert verify_envelope_signature(tampered, cert) is False

    def test_signature_block_content(self, secure_host, fig13_bytes):
        resp = secure_host.handle_request(soap_request(fig13_bytes))
        raw = parse_envelope(resp.body).header(SIGNATURE_HEADER)
        block, cert_text = parse_signature_header(raw)
        assert block.algorithm == "RSA-SHA256"
        assert cert_text is None
        cert = secure_host.service_certificate("CadastroEscolar")
        assert verify_signature(body_canonical(resp.body), block, cert.public_key())

    def test_encrypted_round_trip(self, secure_host, fig13_bytes):
        cert = secure_host.service_certificate("CadastroEscolar")
        wrapped = encrypt_request(
            fig13_bytes, "http://localhost:5000/CadastroEscolar.jws", cert
        )
        resp = secure_host.handle_request(soap_request(wrapped))
        assert resp.status == 200
        assert parse_envelope(resp.body).body.result.value.startswith("#A001")

    def test_encrypted_garbage_is_client_fault(self, secure_host):
        headers = (make_header_entry('<Encrypted xmlns="urn:mobilehost:headers">true</Encrypted>'),)
        payload = call_envelope(
            method="EncryptedRequest",
            params=(("wrappedKey", "AAAA"), ("iv", "AAAA"), ("ciphertext", "AAAA")),
            headers=headers,
        )
        fault = fault_of(secure_host.handle_request(soap_request(payload)))
        assert fault.faultcode == "Client"

    def test_signed_request_accepted(self, secure_host, fig13_bytes, keypair):
        consumer_cert = issue_certificate(keypair, "Consumer/")
        signed = attach_signature(
            fig13_bytes, keypair.privateKey, render_certificate_text(consumer_cert)
        )
        resp = secure_host.handle_request(soap_request(signed))
        assert resp.status == 200
        assert parse_envelope(resp.body).body.result.value.startswith("#A001")

    def test_bad_inbound_signature_rejected(self, secure_host, fig13_bytes, keypair, other_keypair):
        # signed with one key but carrying a different key's certificate
        wrong_cert = issue_certificate(other_keypair, "Consumer/")
        signed = attach_signature(
            fig13_bytes, keypair.privateKey, render_certificate_text(wrong_cert)
        )
        fault = fault_of(secure_host.handle_request(soap_request(signed)))
        assert fault.faultcode == "Client"
        assert "signature" in fault.faultstring


class TestCreateService:
    def test_wsdl_written_and_route_live(self, tmp_path):
        host = make_host(tmp_path)
        wsdl_file = host.cfg.wsdlDir / "CadastroEscolar.wsdl"
        assert wsdl_file.exists()
        assert host.registry.lookup_by_path("/CadastroEscolar.jws")

    def test_identical_recreate_is_noop(self, tmp_path):
        host = make_host(tmp_path, secure_demo=True)
        before = host.registry.lookup_service("CadastroEscolar")
        key_before = host._keys["CadastroEscolar"][0].modulus
        again = host.create_service(notes_descriptor(True), NotesHandler())
        assert again is before
        assert host._keys["CadastroEscolar"][0].modulus == key_before

    def test_changed_signature_is_duplicate(self, tmp_path):
        host = make_host(tmp_path)
        changed = dataclasses.replace(notes_descriptor(), securityEnabled=True)
        with pytest.raises(DuplicateService):
            host.create_service(changed, NotesHandler())

    def test_secure_service_gets_key_material(self, tmp_path):
        host = make_host(tmp_path, secure_demo=True)
        assert (host.cfg.dataDir / "keys" / "CadastroEscolar.key").exists()
        assert (host.cfg.dataDir / "keys" / "CadastroEscolar.cert").exists()
        rec = host.registry.lookup_service("CadastroEscolar")
        assert rec.keySetId == "CadastroEscolar"


class TestLifecycle:
    def test_fresh_dir_is_empty(self, tmp_path):
        host = make_host(tmp_path, with_demo=False)
        assert host.registry.list_services() == []

    def test_restart_restores_services_and_routes(self, tmp_path):
        host = make_host(tmp_path, secure_demo=True)
        host.registry.add_user(make_user("u", "pw", "d", {"*"}))
        host.shutdown()

        revived = make_host(tmp_path, with_demo=False)
        rec = revived.registry.lookup_by_path("/CadastroEscolar.jws")
        assert rec.descriptor == notes_descriptor(True)
        assert revived.registry.check_access("u", "pw", "Whatever")
        # handler re-attachment via identical create_service is a no-op
        revived.create_service(notes_descriptor(True), NotesHandler())
        payload = call_envelope()
        assert revived.handle_request(soap_request(payload)).status == 200
        # and the restored key material still signs responses
        cert = revived.service_certificate("CadastroEscolar")
        resp = revived.handle_request(soap_request(payload))
        assert verify_envelope_signature(resp.body, cert) is True

    def test_corrupt_snapshot_refuses_to_start(self, tmp_path):
        host = make_host(tmp_path)
        host.shutdown()
        services = tmp_path / "data" / "services.db"
        services.write_text(services.read_text()[:25])
        with pytest.raises(CorruptSnapshot):
            make_host(tmp_path, with_demo=False)

    def test_double_shutdown_is_idempotent(self, tmp_path):
        host = make_host(tmp_path)
        host.shutdown()
        host.shutdown()

    def test_shutdown_completes_inflight(self, tmp_path, fig13_bytes):
        release = threading.Event()

        class Slow:
            def executeMethod(self, methodName, args):
                release.wait(5)
                return TypedValue.of(XsdType.STRING, "done")

        host = make_host(tmp_path, with_demo=False)
        host.create_service(simple_descriptor("Slow"), Slow())
        host.start()
        listener = host.loopback()
        payload = call_envelope(method="shout", params=(("text", "x"),),
                                namespace="http://localhost:5000/Slow.jws")
        with concurrent.futures.ThreadPoolExecutor(max_workers=2) as pool:
            inflight = pool.submit(listener.request, payload)
            time.sleep(0.2)
            stopper = pool.submit(host.shutdown)
            time.sleep(0.2)
            release.set()
            resp = inflight.result(timeout=10)
            stopper.result(timeout=10)
        assert parse_envelope(resp.body).body.result.value == "done"


class TestWebBranch:
    def get(self, host, path, query=""):
        return host.handle_request(
            InboundRequest(
                transportKind="http",
                peer="t",
                path=path,
                headers={},
                payload=b"",
                classification="web",
                query=query,
                method="GET",
            )
        )

    def test_wsdl_endpoint(self, demo_host):
        resp = self.get(demo_host, "/CadastroEscolar.jws", "wsdl")
        assert resp.status == 200
        assert b"wsdl:definitions" in resp.body

    def test_cert_endpoint_secured(self, tmp_path):
        host = make_host(tmp_path, secure_demo=True)
        resp = self.get(host, "/CadastroEscolar.jws", "cert")
        assert resp.status == 200
        assert resp.body.startswith(b"----- Begin Certificate -----")

    def test_cert_endpoint_without_security_404(self, demo_host):
        assert self.get(demo_host, "/CadastroEscolar.jws", "cert").status == 404

    def test_unknown_path_404(self, demo_host):
        assert self.get(demo_host, "/index.html").status == 404

    def test_static_file_served(self, tmp_path):
        web = tmp_path / "web"
        web.mkdir()
        (web / "index.html").write_text("<h1>hi</h1>")
        host = make_host(tmp_path, webRoot=web)
        resp = self.get(host, "/index.html")
        assert resp.status == 200
        assert resp.body == b"<h1>hi</h1>"
        assert self.get(host, "/").body == b"<h1>hi</h1>"

    def test_traversal_blocked(self, tmp_path):
        web = tmp_path / "web"
        web.mkdir()
        (tmp_path / "secret.txt").write_text("nope")
        host = make_host(tmp_path, webRoot=web)
        assert self.get(host, "/../secret.txt").status == 404


class TestLogging:
    def test_every_soap_request_logs_exactly_once(self, demo_host, fig13_bytes):
        cases = [
            fig13_bytes,
            call_envelope(method="nope", params=()),
            SOAPISH,
            call_envelope(namespace="http://localhost:5000/Nowhere.jws"),
        ]
        for i, payload in enumerate(cases, start=1):
            demo_host.handle_request(soap_request(payload))
            assert len(demo_host.registry.log_entries()) == i

    def test_outcomes_recorded(self, demo_host, fig13_bytes):
        demo_host.handle_request(soap_request(fig13_bytes))
        demo_host.handle_request(soap_request(call_envelope(method="nope", params=())))
        outcomes = [e.outcome for e in demo_host.registry.log_entries()]
        assert outcomes == ["ok", "clientFault"]

    def test_metrics_visible(self, demo_host, fig13_bytes):
        for _ in range(3):
            demo_host.handle_request(soap_request(fig13_bytes))
        summary = demo_host.registry.metrics_summary()["CadastroEscolar"]
        assert summary["count"] == 3
        assert summary["faultRate"] == 0.0


class TestConcurrencyAndDeployment:
    def test_concurrent_invocations_all_correct(self, demo_host, fig13_bytes):
        listener = demo_host.loopback()
        with concurrent.futures.ThreadPoolExecutor(max_workers=50) as pool:
            futures = [pool.submit(listener.request, fig13_bytes) for _ in range(50)]
            bodies = [f.result(timeout=10) for f in futures]
        for resp in bodies:
            assert parse_envelope(resp.body).body.result.value.startswith("#A001")

    def test_register_under_load_routes_next_request(self, demo_host, fig13_bytes):
        listener = demo_host.loopback()
        stop = threading.Event()
        errors = []

        def hammer():
            while not stop.is_set():
                resp = listener.request(fig13_bytes)
                if resp.status != 200:
                    errors.append(resp)

        threads = [threading.Thread(target=hammer) for _ in range(4)]
        for t in threads:
            t.start()
        time.sleep(0.1)
        demo_host.create_service(simple_descriptor("Fresh"), UpperHandler())
        payload = call_envelope(method="shout", params=(("text", "abc"),),
                                namespace="http://localhost:5000/Fresh.jws")
        resp = listener.request(payload)
        stop.set()
        for t in threads:
            t.join()
        assert parse_envelope(resp.body).body.result.value == "ABC"
        assert not errors

    def test_remove_during_traffic_client_faults_after(self, demo_host, fig13_bytes):
        demo_host.remove_service("CadastroEscolar")
        fault = fault_of(demo_host.handle_request(soap_request(fig13_bytes)))
        assert fault.faultcode == "Client"
        # WSDL file survives removal
        assert (demo_host.cfg.wsdlDir / "CadastroEscolar.wsdl").exists()

    def test_exclusive_execution_serializes_handler(self, tmp_path):
        active = []
        overlap = []
        gate = threading.Lock()

        class Tracker:
            def executeMethod(self, methodName, args):
                with gate:
                    active.append(1)
                    if len(active) > 1:
                        overlap.append(True)
                time.sleep(0.02)
                with gate:
                    active.pop()
                return TypedValue.of(XsdType.STRING, "ok")

        host = make_host(tmp_path, with_demo=False)
        host.create_service(simple_descriptor("Solo", exclusive=True), Tracker())
        host.start()
        listener = host.loopback()
        payload = call_envelope(method="shout", params=(("text", "x"),),
                                namespace="http://localhost:5000/Solo.jws")
        with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
            futures = [pool.submit(listener.request, payload) for _ in range(8)]
            for f in futures:
                assert f.result(timeout=10).status == 200
        host.shutdown()
        assert not overlap


class TestRobustness:
    def test_fuzz_subset_always_answers(self, demo_host, fig13_bytes):
        rng = random.Random(99)
        cases = []
        for _ in range(300):
            kind = rng.randrange(4)
            if kind == 0:
                cases.append(bytes(rng.randrange(256) for _ in range(rng.randrange(200))))
            elif kind == 1:
                mutated = bytearray(fig13_bytes)
                for _ in range(rng.randrange(1, 10)):
                    mutated[rng.randrange(len(mutated))] = rng.randrange(256)
                cases.append(bytes(mutated))
            elif kind == 2:
                cases.append(b"<" + bytes(rng.choices(b"abc<>/& \"'=", k=50)))
            else:
                cases.append(fig13_bytes[: rng.randrange(len(fig13_bytes))])
        for payload in cases:
            resp = demo_host.handle_request(soap_request(payload))
            assert resp.status in (200, 400, 404, 500)
            assert isinstance(resp.body, bytes)
