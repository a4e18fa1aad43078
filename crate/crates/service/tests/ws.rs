use fdvv_core::actuation::{ActuationCurve, ActuationTable};
use fdvv_core::bspline::BSplineCurve;
use fdvv_core::grid::DisplacementGrid;
use fdvv_core::model::{FdvvModel, VelocityCurve};
use fdvv_core::render::{Event, TickRecord};
use fdvv_core::vibration::VibrationDescriptor;
use fdvv_service::server::{router, AppState};
use fdvv_service::store::ModelStore;
use futures::{SinkExt, StreamExt};
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::Message;

fn model() -> FdvvModel {
    FdvvModel {
        button_id: "ws".into(),
        travel_range_mm: 4.0,
        activation_point_mm: 2.0,
        press_curves: vec![VelocityCurve {
            velocity_mm_s: 100.0,
            curve: BSplineCurve::with_forces(3, 0.0, 4.0, &[45.0; 15]).unwrap(),
        }],
        release_curves: None,
        vibration: Some(VibrationDescriptor {
            onset_mm: 2.4,
            duration_ms: 16.0,
            frequency_hz: 239.0,
            template_id: "sin-239hz-end0.0v".into(),
        }),
    }
}

fn table() -> ActuationTable {
    let g = DisplacementGrid::new(4.0);
    ActuationTable {
        button_id: "ws".into(),
        plant_id: "identity".into(),
        travel_range_mm: 4.0,
        activation_point_mm: Some(2.0),
        vibration: None,
        curves: vec![ActuationCurve::new(100.0, g, vec![45.0; g.len()])],
        interpolated: false,
    }
}

async fn start() -> String {
    let mut store = ModelStore::in_memory();
    store.insert("ws", model()).unwrap();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(AppState::new(store))).await });
    format!("{addr}")
}

async fn open_session(addr: &str) -> u64 {
    let body = json!({ "model_id": "ws", "plant_id": "identity", "actuation": table() });
    let (status, res) = request(addr, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, 201);
    res["session_id"].as_u64().unwrap()
}

/// Minimal HTTP/1.1 over a raw socket.
async fn request(addr: &str, method: &str, path: &str, body: Option<Value>) -> (u16, Value) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut s = tokio::net::TcpStream::connect(addr).await.unwrap();
    let body = body.map(|b| b.to_string()).unwrap_or_default();
    let req = format!(
        "{method} {path} HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    s.write_all(req.as_bytes()).await.unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).await.unwrap();
    let text = String::from_utf8(buf).unwrap();
    let (head, payload) = text.split_once("\r\n\r\n").unwrap();
    let status = head[9..12].parse().unwrap();
    (status, serde_json::from_str(payload).unwrap_or(Value::Null))
}

#[tokio::test]
async fn press_streams_ordered_ticks() {
    let addr = start().await;
    let id = open_session(&addr).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws/sessions/{id}"))
        .await
        .unwrap();
    let press = json!({ "press": { "velocity_mm_s": 100.0, "depth_mm": 4.0, "rest_ms": 0, "dwell_ms": 5 } });
    ws.send(Message::Text(press.to_string().into())).await.unwrap();

    let mut ticks: Vec<TickRecord> = Vec::new();
    let done = loop {
        let msg = ws.next().await.unwrap().unwrap();
        let text = msg.into_text().unwrap();
        let v: Value = serde_json::from_str(&text).unwrap();
        if v.get("done").is_some() {
            break v;
        }
        ticks.push(serde_json::from_value(v).unwrap());
    };
    assert_eq!(done["done"]["ticks"].as_u64().unwrap() as usize, ticks.len());
    assert!((40..=45).contains(&ticks.len()), "{} ticks", ticks.len());
    assert!(ticks.windows(2).all(|w| w[1].t == w[0].t + 1.0));

    let at = |e: Event| ticks.iter().find(|r| r.events.contains(&e)).map(|r| r.t);
    let activation = at(Event::Activation).expect("activation");
    let vibration = at(Event::VibrationStart).expect("vibration start");
    let bottom = at(Event::BottomOut).expect("bottom out");
    assert!(activation < vibration && vibration < bottom, "{activation} {vibration} {bottom}");

    // a second press on the same connection streams again
    ws.send(Message::Text(press.to_string().into())).await.unwrap();
    let mut second = 0;
    loop {
        let v: Value = serde_json::from_str(&ws.next().await.unwrap().unwrap().into_text().unwrap()).unwrap();
        if v.get("done").is_some() {
            break;
        }
        second += 1;
    }
    assert_eq!(second, ticks.len());

    let (status, session) = request(&addr, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, 200);
    assert_eq!(session["status"], "done");
    assert_eq!(session["ticks_sent"].as_u64().unwrap() as usize, 2 * ticks.len());
}

#[tokio::test]
async fn bad_commands_get_an_error_message() {
    let addr = start().await;
    let id = open_session(&addr).await;
    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{addr}/ws/sessions/{id}"))
        .await
        .unwrap();
    ws.send(Message::Text("{\"press\": 7}".into())).await.unwrap();
    let v: Value = serde_json::from_str(&ws.next().await.unwrap().unwrap().into_text().unwrap()).unwrap();
    assert!(v["error"].as_str().unwrap().starts_with("bad command"));

    ws.send(Message::Text(json!({ "press": { "velocity_mm_s": -3.0 } }).to_string().into()))
        .await
        .unwrap();
    let v: Value = serde_json::from_str(&ws.next().await.unwrap().unwrap().into_text().unwrap()).unwrap();
    assert!(v["error"].as_str().unwrap().contains("velocity"), "{v}");
}

#[tokio::test]
async fn unknown_session_is_refused() {
    let addr = start().await;
    let err = tokio_tungstenite::connect_async(format!("ws://{addr}/ws/sessions/999"))
        .await
        .unwrap_err();
    match err {
        tokio_tungstenite::tungstenite::Error::Http(res) => assert_eq!(res.status(), 404),
        other => panic!("{other}"),
    }
}
