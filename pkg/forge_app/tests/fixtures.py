"""
Shared test data: the published few-shot replies, a synthetic VQA corpus with
Pillow-drawn images, and config documents for mock runs.
"""
import json
import re
from io import BytesIO
from pathlib import Path

from PIL import Image

from forge_app.config import build_config
from forge_app.models import ClassifiedRecord, EditCategory, InstructionVariant, VqaRecord
from forge_app.prompts import CLASSIFICATION_SYSTEM_PROMPT, TRANSFORM_PROMPTS


# --- Images -----------------------------------------------------------------

def png_bytes(color=(200, 30, 30), size=(8, 8)):
    buffer = BytesIO()
    Image.new('RGB', size, color).save(buffer, format='PNG')
    return buffer.getvalue()


def jpeg_bytes(color=(30, 200, 30), size=(8, 8)):
    buffer = BytesIO()
    Image.new('RGB', size, color).save(buffer, format='JPEG')
    return buffer.getvalue()


def write_image(path, color=(200, 30, 30)):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(png_bytes(color))
    return path


def write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write((row if isinstance(row, str) else json.dumps(row, ensure_ascii=False)) + '\n')
    return path


# --- Published classification examples -----------------------------------

_EXAMPLE_BLOCK = re.compile(
    r"Input:\noriginal question: (?P<question>.*?)\noriginal answer: (?P<answer>.*?)\n"
    r"image_path: (?P<image>.*?)\n\nOutput:\n(?P<output>\{.*?\n\})",
    re.DOTALL,
)

# (task_category, process_answer); None means "the original answer, verbatim"
CLASSIFICATION_EXPECTED = [
    ('shape', 'sphere'),
    ('bool', 'yes'),
    ('caption', None),
    ('count', '5'),
    ('math', None),
]


def classification_examples():
    """
    The five few-shot examples of the classification prompt as
    (VqaRecord, reply text, expected category, expected process_answer).

    The printed math reply breaks its own "original question" key, so its
    reply is the same content re-encoded as valid JSON.
    """
    examples = []
    for index, match in enumerate(_EXAMPLE_BLOCK.finditer(CLASSIFICATION_SYSTEM_PROMPT)):
        record = VqaRecord(
            id=f'example-{index + 1}',
            original_question=match.group('question'),
            original_answer=match.group('answer'),
            image_path=match.group('image'),
        )
        category, process_answer = CLASSIFICATION_EXPECTED[index]
        reply = match.group('output')
        if category == 'math':
            reply = json.dumps({
                'task_category': 'math',
                'original_question': record.original_question,
                'original_answer': record.original_answer,
                'process_answer': record.original_answer,
                'image_path': record.image_path,
            })
        examples.append((record, reply, category, process_answer or record.original_answer))
    return examples


# --- Published transformation examples -----------------------------------

_OUTPUT_LINE = re.compile(r'^Output: (\{"edit_instruction": .*\})$', re.MULTILINE)

SHAPE_QUESTION = 'There is a cyan thing that is the same size as the blue rubber ball; what shape is it?'
COLOR_QUESTION = 'There is another tiny sphere that is the same material as the small green sphere; what is its color?'
COUNT_QUESTION = (
    'Hint: Please answer the question and provide the final answer at the end.\n'
    'Question: How many objects are left if you remove all spheres and cylinders?'
)
CAPTION_QUESTION = 'Describe the region [0.420, 0.192, 0.628, 0.362] in the image'
CAPTION_ANSWER = (
    'The given region [0.420, 0.192, 0.628, 0.362] in the image highlights a door on the building. '
    'The door is centrally located within the specified...'
)
OCR_QUESTION = 'Given a screenshot of a webpage, locate the red bounding box and extract the text it encloses.'
OCR_ANSWER = (
    'ChillDad247: Hey, don’t let the stress get to you. SleepBaby.org has some cool tips on keeping '
    'both you and the baby chill. Wish I knew about it sooner during my partner’s pregnancy.'
)
LOCATION_QUESTION = (
    "Please identify the area in this image where 'the items stacked all over the counter' and give me "
    "the region coordinates [xmin, ymin, xmax, ymax]."
)
MATH_QUESTION = (
    'If the ABCDE shape is a combination of a rectangle and an equilateral triangle and the length of the '
    'height of the equilateral triangle part of the ABCDE shape is 14, compute the perimeter of the ABCDE '
    'shape. Round computations to 2 decimal places.'
)
MATH_ANSWER = (
    'For the ABCDE shape, the length of the AB side of the rectangle is 18 and the length of its other side '
    'can be computed based on the height of the equilateral triangle as $\\frac{\\sqrt{3}}{2} * 14 = '
    '\\frac{1.73}{2} * 14 = 1.16 * 14 = 16.24$. So the ABCDE shape has two rectangle sides with length 18, '
    'one rectangle side with length 16.24, and two triangle sides with length 16.24 so its perimeter becomes '
    '$2 * 18 + 3 * 16.24 = 36 + 48.72 = 84.72$. Therefore the final answer is 84.72.'
)

# (variant, index of the Output line in that variant's prompt, category, question, process_answer)
TRANSFORM_EXAMPLES = [
    (InstructionVariant.ATTRIBUTE_BOOL, 0, EditCategory.SHAPE, SHAPE_QUESTION, 'cube'),
    (InstructionVariant.ATTRIBUTE_BOOL, 1, EditCategory.COLOR, COLOR_QUESTION, 'purple'),
    (InstructionVariant.ATTRIBUTE_GENERATION, 0, EditCategory.SHAPE, SHAPE_QUESTION, 'cube'),
    (InstructionVariant.ATTRIBUTE_GENERATION, 1, EditCategory.COLOR, COLOR_QUESTION, 'purple'),
    (InstructionVariant.COUNT_BOOL, 0, EditCategory.COUNT, COUNT_QUESTION, '2'),
    (InstructionVariant.COUNT_GENERATION, 0, EditCategory.COUNT, COUNT_QUESTION, '2'),
    (InstructionVariant.BLACKBOARD_CAPTION_OCR, 0, EditCategory.CAPTION, CAPTION_QUESTION, CAPTION_ANSWER),
    (InstructionVariant.BLACKBOARD_CAPTION_OCR, 1, EditCategory.OCR, OCR_QUESTION, OCR_ANSWER),
    (InstructionVariant.LOCATION_REPLACEMENT, 0, EditCategory.LOCATION, LOCATION_QUESTION,
     '[0.54, 0.33, 0.68, 0.58]'),
    (InstructionVariant.BLACKBOARD_MATH, 1, EditCategory.MATH, MATH_QUESTION, MATH_ANSWER),
]


def classified(category, question, process_answer, record_id='rec-1', original_answer=None):
    return ClassifiedRecord(
        id=record_id,
        original_question=question,
        original_answer=original_answer if original_answer is not None else process_answer,
        image_path='img.png',
        task_category=str(category),
        process_answer=process_answer,
    )


def transform_examples():
    """(ClassifiedRecord, variant, reply text) for each usable published instruction example"""
    examples = []
    for index, (variant, position, category, question, answer) in enumerate(TRANSFORM_EXAMPLES):
        reply = _OUTPUT_LINE.findall(TRANSFORM_PROMPTS[variant])[position]
        examples.append((classified(category, question, answer, record_id=f'golden-{index}'), variant, reply))
    return examples


# --- Synthetic corpus -------------------------------------------------------

# One row per category; the mock classifier routes each to the named category
CORPUS_TEMPLATES = [
    ('shape', "What shape is object number {i}?", "Looking closely, the object is a cube"),
    ('color', "What color is item {i}?", "It looks red"),
    ('count', "How many cubes are in scene {i}?", "There are 3 cubes in total."),
    ('location',
     "Please identify the area in image {i} where 'the red mug' sits and give me the region coordinates "
     "[xmin, ymin, xmax, ymax].",
     "[0.10, 0.20, 0.30, 0.40]"),
    ('caption', "Describe scene {i} briefly.", "A quiet street with parked bikes, take {i}."),
    ('ocr', "Read the text on sign {i}.", "OPEN DAILY {i}"),
    ('math', "Compute the sum of {i} and 7.", "Adding the two numbers gives {total}. Therefore the final answer is {total}."),
    ('multi-choice', "Which animal is shown in photo {i}?\nOptions: (a) cat (b) dog", "cat"),
    ('bool', "Is the lamp in room {i} switched on?", "Yes, it is switched on."),
    ('others', "What time is shown on clock {i}?", "Ten past three."),
]

CORPUS_COLORS = [(200, 30, 30), (30, 200, 30), (30, 30, 200), (200, 200, 30), (30, 200, 200)]


def corpus_rows(count):
    rows = []
    for i in range(count):
        category, question, answer = CORPUS_TEMPLATES[i % len(CORPUS_TEMPLATES)]
        rows.append({
            'id': f'r{i:05d}',
            'original_question': question.format(i=i),
            'original_answer': answer.format(i=i, total=i + 7),
            'image_path': f'img-{i % len(CORPUS_COLORS)}.png',
            'source_dataset': f'synthetic-{category}',
        })
    return rows


def build_corpus(root, count, knowledge=0):
    """
    Write input.jsonl (and knowledge.jsonl when knowledge > 0) plus images under root.

    Returns:
        list: the input rows written
    """
    root = Path(root)
    for index, color in enumerate(CORPUS_COLORS):
        write_image(root / 'images' / f'img-{index}.png', color)
    rows = corpus_rows(count)
    write_jsonl(root / 'input.jsonl', rows)
    if knowledge:
        knowledge_rows = []
        for i in range(knowledge):
            write_image(root / 'images' / 'targets' / f'target-{i}.png', (i % 256, 90, 160))
            knowledge_rows.append({
                'edit_instruction': f"Place the landmark described in note {i} onto the scene.",
                'image_path': f'img-{i % len(CORPUS_COLORS)}.png',
                'target_image_path': f'targets/target-{i}.png',
            })
        write_jsonl(root / 'knowledge.jsonl', knowledge_rows)
    return rows


def config_document(**overrides):
    """A mock-mode run config; backends and flags merge one level deep"""
    document = {
        'input_path': 'input.jsonl',
        'image_root': 'images',
        'work_dir': 'work',
        'output_dir': 'out',
        'seed': 7,
        'backoff_base': 0,
        'backoff_cap': 0,
        'max_workers': 8,
        'flags': {'mock': True},
        'backends': {},
    }
    for key in ('flags', 'backends'):
        document[key].update(overrides.pop(key, {}))
    document.update(overrides)
    return document


def make_config(root, **overrides):
    return build_config(config_document(**overrides), base_dir=root)


def write_config(root, **overrides):
    path = Path(root) / 'forge.json'
    path.write_text(json.dumps(config_document(**overrides)), encoding='utf-8')
    return path
