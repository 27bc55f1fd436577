//! Static STAC catalog subset: item metadata, catalog traversal, and pure
//! metadata search. Items carry STAC 1.0.0 core fields plus
//! projection-extension-style fields (`epsg`, `transform`, `shape`)
//! flattened into `properties`. Unknown fields are ignored.

pub mod fetch;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BBox, GridSpec};
use fetch::{is_url, join_locator, Fetcher};

/// Role of an asset within an item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetRole {
    Data,
    Quality,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StacAsset {
    pub href: String,
    /// Media type as given by the catalog; informational only.
    #[serde(rename = "type")]
    pub media_type: String,
    pub role: AssetRole,
}

/// One dated, georeferenced acquisition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StacItem {
    pub id: String,
    pub collection: String,
    /// Extent in EPSG:4326 degrees, used for search.
    pub bbox: BBox,
    pub datetime: DateTime<Utc>,
    /// Projection of the pixel data (not necessarily 4326).
    pub epsg: u32,
    /// (origin_x, pixel_width, origin_y, pixel_height), world units.
    pub transform: [f64; 4],
    /// (rows, cols).
    pub shape: [usize; 2],
    pub assets: BTreeMap<String, StacAsset>,
    /// Locator of the item document; relative asset hrefs resolve against it.
    #[serde(skip)]
    pub href: String,
}

impl StacItem {
    /// Extent of the pixel grid in the item's native CRS.
    pub fn footprint(&self) -> BBox {
        let [origin_x, pw, origin_y, ph] = self.transform;
        let [rows, cols] = self.shape;
        BBox {
            minx: origin_x,
            miny: origin_y + rows as f64 * ph,
            maxx: origin_x + cols as f64 * pw,
            maxy: origin_y,
        }
    }

    /// The item's native pixel grid.
    pub fn grid(&self) -> Result<GridSpec> {
        let [origin_x, pw, origin_y, ph] = self.transform;
        GridSpec::new(self.epsg, origin_x, origin_y, pw, ph, self.shape[1], self.shape[0])
    }

    /// Data asset for a band (asset key = band name, role = data).
    pub fn data_asset(&self, band: &str) -> Option<&StacAsset> {
        self.assets.get(band).filter(|a| a.role == AssetRole::Data)
    }

    /// First asset with the quality role, if any.
    pub fn quality_asset(&self) -> Option<&StacAsset> {
        self.assets.values().find(|a| a.role == AssetRole::Quality)
    }

    /// Resolve an asset href against this item's document locator.
    pub fn resolve(&self, asset: &StacAsset) -> String {
        join_locator(&self.href, &asset.href)
    }
}

#[derive(Debug, Clone)]
pub struct Catalog {
    /// Locator of the root catalog document.
    pub root: String,
    /// Items in traversal order.
    pub items: Vec<StacItem>,
    pub collections: BTreeSet<String>,
}

/// Search predicates; absent fields match everything.
#[derive(Debug, Clone, Default)]
pub struct SearchQuery {
    pub bbox: Option<BBox>,
    pub start: Option<DateTime<Utc>>,
    pub end: Option<DateTime<Utc>>,
    pub collections: Option<BTreeSet<String>>,
    pub required_bands: Option<BTreeSet<String>>,
}

impl SearchQuery {
    pub fn validate(&self) -> Result<()> {
        if let Some(b) = &self.bbox {
            if b.minx > b.maxx || b.miny > b.maxy {
                return Err(Error::InvalidQuery {
                    reason: format!("inverted bbox [{}, {}, {}, {}]", b.minx, b.miny, b.maxx, b.maxy),
                });
            }
        }
        if let (Some(start), Some(end)) = (&self.start, &self.end) {
            if start > end {
                return Err(Error::InvalidQuery {
                    reason: format!("start {start} is after end {end}"),
                });
            }
        }
        Ok(())
    }

    fn matches(&self, item: &StacItem) -> bool {
        if let Some(b) = &self.bbox {
            if !item.bbox.intersects(b) {
                return false;
            }
        }
        if let Some(start) = &self.start {
            if item.datetime < *start {
                return false;
            }
        }
        if let Some(end) = &self.end {
            if item.datetime > *end {
                return false;
            }
        }
        if let Some(cols) = &self.collections {
            if !cols.contains(&item.collection) {
                return false;
            }
        }
        if let Some(bands) = &self.required_bands {
            if !bands.iter().all(|b| item.data_asset(b).is_some()) {
                return false;
            }
        }
        true
    }
}

/// Parse an RFC 3339 instant; only the 'Z' offset is accepted.
pub fn parse_datetime(s: &str) -> std::result::Result<DateTime<Utc>, String> {
    if !s.ends_with('Z') {
        return Err(format!("datetime {s:?} must use the 'Z' UTC offset"));
    }
    DateTime::parse_from_rfc3339(s)
        .map(|dt| dt.with_timezone(&Utc))
        .map_err(|e| format!("bad datetime {s:?}: {e}"))
}

// ===== document parsing ====================================================

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawLink {
    rel: String,
    href: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawCatalogDoc {
    links: Vec<RawLink>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawAsset {
    href: Option<String>,
    #[serde(rename = "type")]
    media_type: Option<String>,
    role: Option<String>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawProps {
    datetime: Option<String>,
    epsg: Option<i64>,
    transform: Option<Vec<f64>>,
    shape: Option<Vec<i64>>,
}

#[derive(Deserialize, Default)]
#[serde(default)]
struct RawItem {
    id: Option<String>,
    collection: Option<String>,
    bbox: Option<Vec<f64>>,
    properties: Option<RawProps>,
    assets: Option<BTreeMap<String, RawAsset>>,
}

fn invalid(href: &str, field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidItem {
        href: href.to_string(),
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Parse and validate one item document. `href` is the document locator,
/// kept on the item and used in diagnostics.
pub fn parse_item(href: &str, bytes: &[u8]) -> Result<StacItem> {
    let raw: RawItem = serde_json::from_slice(bytes).map_err(|e| Error::MalformedDocument {
        href: href.to_string(),
        reason: e.to_string(),
    })?;

    let id = raw
        .id
        .filter(|s| !s.is_empty())
        .ok_or_else(|| invalid(href, "id", "missing or empty"))?;
    let collection = raw
        .collection
        .filter(|s| !s.is_empty())
        .ok_or_else(|| invalid(href, "collection", "missing or empty"))?;

    let bbox_raw = raw.bbox.ok_or_else(|| invalid(href, "bbox", "missing"))?;
    if bbox_raw.len() != 4 {
        return Err(invalid(href, "bbox", format!("expected 4 numbers, got {}", bbox_raw.len())));
    }
    let bbox = BBox::new(bbox_raw[0], bbox_raw[1], bbox_raw[2], bbox_raw[3])
        .map_err(|_| invalid(href, "bbox", "inverted (min > max)"))?;

    let props = raw
        .properties
        .ok_or_else(|| invalid(href, "properties", "missing"))?;
    let datetime_str = props
        .datetime
        .ok_or_else(|| invalid(href, "properties.datetime", "missing"))?;
    let datetime =
        parse_datetime(&datetime_str).map_err(|e| invalid(href, "properties.datetime", e))?;

    let epsg = props
        .epsg
        .ok_or_else(|| invalid(href, "properties.epsg", "missing"))?;
    if epsg <= 0 || epsg > u32::MAX as i64 {
        return Err(invalid(href, "properties.epsg", format!("must be a positive integer, got {epsg}")));
    }

    let transform_raw = props
        .transform
        .ok_or_else(|| invalid(href, "properties.transform", "missing"))?;
    if transform_raw.len() != 4 {
        return Err(invalid(
            href,
            "properties.transform",
            format!("expected 4 numbers, got {}", transform_raw.len()),
        ));
    }
    let transform = [transform_raw[0], transform_raw[1], transform_raw[2], transform_raw[3]];
    if transform[1] <= 0.0 {
        return Err(invalid(href, "properties.transform", format!("pixel_width must be > 0, got {}", transform[1])));
    }
    if transform[3] >= 0.0 {
        return Err(invalid(href, "properties.transform", format!("pixel_height must be < 0, got {}", transform[3])));
    }

    let shape_raw = props
        .shape
        .ok_or_else(|| invalid(href, "properties.shape", "missing"))?;
    if shape_raw.len() != 2 {
        return Err(invalid(href, "properties.shape", format!("expected [rows, cols], got {} values", shape_raw.len())));
    }
    if shape_raw[0] <= 0 || shape_raw[1] <= 0 {
        return Err(invalid(href, "properties.shape", format!("rows and cols must be positive, got {shape_raw:?}")));
    }
    let shape = [shape_raw[0] as usize, shape_raw[1] as usize];

    let mut assets = BTreeMap::new();
    for (key, raw_asset) in raw.assets.unwrap_or_default() {
        let field = format!("assets.{key}");
        let asset_href = raw_asset
            .href
            .filter(|s| !s.is_empty())
            .ok_or_else(|| invalid(href, &format!("{field}.href"), "missing or empty"))?;
        let role = match raw_asset.role.as_deref() {
            Some("data") => AssetRole::Data,
            Some("quality") => AssetRole::Quality,
            Some(other) => {
                return Err(invalid(href, &format!("{field}.role"), format!("expected \"data\" or \"quality\", got {other:?}")))
            }
            None => return Err(invalid(href, &format!("{field}.role"), "missing")),
        };
        assets.insert(
            key,
            StacAsset {
                href: asset_href,
                media_type: raw_asset.media_type.unwrap_or_default(),
                role,
            },
        );
    }

    Ok(StacItem {
        id,
        collection,
        bbox,
        datetime,
        epsg: epsg as u32,
        transform,
        shape,
        assets,
        href: href.to_string(),
    })
}

/// Normalize a catalog root locator to its `catalog.json` document.
pub fn resolve_root(root: &str) -> String {
    if is_url(root) {
        if root.ends_with(".json") {
            root.to_string()
        } else {
            format!("{}/catalog.json", root.trim_end_matches('/'))
        }
    } else if std::path::Path::new(root).is_dir() {
        std::path::Path::new(root)
            .join("catalog.json")
            .to_string_lossy()
            .into_owned()
    } else {
        root.to_string()
    }
}

/// Load every item reachable from the root catalog document, following
/// `item` links directly and recursing into `child` catalogs.
pub fn load_catalog(fetcher: &Fetcher, root: &str) -> Result<Catalog> {
    let root_doc = resolve_root(root);
    let mut items = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut visited_docs = BTreeSet::new();
    walk_catalog(fetcher, &root_doc, &mut items, &mut seen_ids, &mut visited_docs)?;
    let collections = items.iter().map(|it| it.collection.clone()).collect();
    Ok(Catalog {
        root: root_doc,
        items,
        collections,
    })
}

fn walk_catalog(
    fetcher: &Fetcher,
    doc_href: &str,
    items: &mut Vec<StacItem>,
    seen_ids: &mut BTreeSet<String>,
    visited_docs: &mut BTreeSet<String>,
) -> Result<()> {
    if !visited_docs.insert(doc_href.to_string()) {
        return Ok(());
    }
    let bytes = fetcher.fetch(doc_href)?;
    let doc: RawCatalogDoc =
        serde_json::from_slice(&bytes).map_err(|e| Error::MalformedDocument {
            href: doc_href.to_string(),
            reason: e.to_string(),
        })?;
    for link in &doc.links {
        if link.rel != "item" && link.rel != "child" {
            continue;
        }
        let target = link.href.as_deref().ok_or_else(|| Error::MalformedDocument {
            href: doc_href.to_string(),
            reason: format!("{} link without href", link.rel),
        })?;
        let target = join_locator(doc_href, target);
        if link.rel == "child" {
            walk_catalog(fetcher, &target, items, seen_ids, visited_docs)?;
        } else {
            let item_bytes = fetcher.fetch(&target)?;
            let item = parse_item(&target, &item_bytes)?;
            if !seen_ids.insert(item.id.clone()) {
                return Err(Error::DuplicateItemId { id: item.id });
            }
            items.push(item);
        }
    }
    Ok(())
}

/// Pure metadata search: every present predicate must hold; results sorted
/// ascending by (datetime, id). No pixel I/O occurs.
pub fn search(catalog: &Catalog, query: &SearchQuery) -> Result<Vec<StacItem>> {
    query.validate()?;
    let mut hits: Vec<StacItem> = catalog
        .items
        .iter()
        .filter(|it| query.matches(it))
        .cloned()
        .collect();
    hits.sort_by(|a, b| (a.datetime, &a.id).cmp(&(b.datetime, &b.id)));
    Ok(hits)
}
