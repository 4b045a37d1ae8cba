/**
 * The seven source datasets: class tables, published split counts, and
 * download locations. Split counts are the published train/test sizes and
 * are enforced at conversion when `verifyCounts` is set; entries marked
 * null were not verifiable offline and are reported rather than enforced.
 * md5 digests are filled from the upstream registry when known; conversion
 * can also pin a digest explicitly via --expect-md5.
 */

export interface DatasetInfo {
  name: string;
  modality: string;
  specialty: string;
  grayscale: boolean;
  classes: string[];
  nTrain: number | null;
  nTest: number | null;
  md5: string | null;
  url: string;
}

const ZENODO = "https://zenodo.org/records/10519652/files";

export const DATASETS: Record<string, DatasetInfo> = {
  pathmnist: {
    name: "pathmnist",
    modality: "histology",
    specialty: "pathology",
    grayscale: false,
    classes: [
      "adipose",
      "background",
      "debris",
      "lymphocytes",
      "mucus",
      "smooth muscle",
      "normal colon mucosa",
      "cancer-associated stroma",
      "colorectal adenocarcinoma epithelium",
    ],
    nTrain: 89996,
    nTest: 7180,
    md5: null,
    url: `${ZENODO}/pathmnist.npz`,
  },
  bloodmnist: {
    name: "bloodmnist",
    modality: "microscopy",
    specialty: "pathology",
    grayscale: false,
    classes: [
      "basophil",
      "eosinophil",
      "erythroblast",
      "immature granulocytes",
      "lymphocyte",
      "monocyte",
      "neutrophil",
      "platelet",
    ],
    nTrain: 11959,
    nTest: 3421,
    md5: null,
    url: `${ZENODO}/bloodmnist.npz`,
  },
  tissuemnist: {
    name: "tissuemnist",
    modality: "microscopy",
    specialty: "pathology",
    grayscale: true,
    classes: [
      "collecting duct, connecting tubule",
      "distal convoluted tubule",
      "glomerular endothelial cells",
      "interstitial endothelial cells",
      "leukocytes",
      "podocytes",
      "proximal tubule segments",
      "thick ascending limb",
    ],
    nTrain: 165466,
    nTest: 47280,
    md5: null,
    url: `${ZENODO}/tissuemnist.npz`,
  },
  organcmnist: {
    name: "organcmnist",
    modality: "CT",
    specialty: "radiology",
    grayscale: true,
    classes: [
      "bladder",
      "femur-left",
      "femur-right",
      "heart",
      "kidney-left",
      "kidney-right",
      "liver",
      "lung-left",
      "lung-right",
      "pancreas",
      "spleen",
    ],
    nTrain: null, // not verifiable offline; reported, not enforced
    nTest: null,
    md5: null,
    url: `${ZENODO}/organcmnist.npz`,
  },
  breastmnist: {
    name: "breastmnist",
    modality: "ultrasound",
    specialty: "radiology",
    grayscale: true,
    classes: ["malignant", "normal, benign"],
    nTrain: 546,
    nTest: 156,
    md5: null,
    url: `${ZENODO}/breastmnist.npz`,
  },
  pneumoniamnist: {
    name: "pneumoniamnist",
    modality: "chest X-ray",
    specialty: "radiology",
    grayscale: true,
    classes: ["normal", "pneumonia"],
    nTrain: 4708,
    nTest: 624,
    md5: null,
    url: `${ZENODO}/pneumoniamnist.npz`,
  },
  dermamnist: {
    name: "dermamnist",
    modality: "dermatoscopy",
    specialty: "dermatology",
    grayscale: false,
    classes: [
      "actinic keratoses and intraepithelial carcinoma",
      "basal cell carcinoma",
      "benign keratosis-like lesions",
      "dermatofibroma",
      "melanoma",
      "melanocytic nevi",
      "vascular lesions",
    ],
    nTrain: 7007,
    nTest: 2005,
    md5: null,
    url: `${ZENODO}/dermamnist.npz`,
  },
};

export function datasetInfo(name: string): DatasetInfo {
  const info = DATASETS[name.toLowerCase()];
  if (!info) {
    const known = Object.keys(DATASETS).join(", ");
    throw new Error(`unknown dataset '${name}' (known: ${known})`);
  }
  return info;
}
