"""
Stage completion events over MQTT.

A duty-cycled node reports each finished stage to whatever listens on the
broker (a gateway, Home Assistant, a logger). Publishing is best effort: a
missing broker must never fail the stage that produced the data.
"""

import json
import logging
import socket

import paho.mqtt.client as mqtt

EVENT_PAYLOAD_VERSION = 1


def mqtt_client(mqtt_config: dict) -> mqtt.Client:
    # paho-mqtt 1.x lacks CallbackAPIVersion; only pass it when available.
    kwargs = {}
    callback_version = getattr(mqtt, "CallbackAPIVersion", None)
    if callback_version:
        kwargs["callback_api_version"] = callback_version.VERSION2

    client = mqtt.Client(**kwargs)
    if mqtt_config.get("user"):
        client.username_pw_set(mqtt_config["user"], mqtt_config.get("password"))
    if mqtt_config.get("ssl"):
        client.tls_set()
    return client


def build_stage_event(
    app_id: str,
    stage_id: str,
    status: str,
    inputs: list[str],
    payload_bytes: int,
    duration_ms: float,
    exit_code: int | None,
) -> dict:
    return {
        "version": EVENT_PAYLOAD_VERSION,
        "app_id": app_id,
        "stage_id": stage_id,
        "host": socket.gethostname().split(".")[0],
        "status": status,
        "inputs": sorted(inputs),
        "payload_bytes": payload_bytes,
        "duration_ms": round(duration_ms, 3),
        "exit_code": exit_code,
    }


def publish_stage_event(mqtt_config: dict, event: dict) -> bool:
    """
    Publish without raising; errors are logged and reported as False.
    """
    if not mqtt_config.get("enabled"):
        return False

    topic = mqtt_config["topic"]
    if event.get("status") == "error":
        topic = mqtt_config.get("error_topic") or topic

    try:
        client = mqtt_client(mqtt_config)
        client.connect(mqtt_config["host"], mqtt_config["port"], 10)
        client.publish(topic, json.dumps(event), qos=1, retain=False)
        client.disconnect()
    except Exception as e:
        logging.warning("MQTT publish failed (ignored): %s", e)
        return False

    logging.info("stage event published to %s", topic)
    return True
